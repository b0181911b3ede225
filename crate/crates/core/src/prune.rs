//! Channel pruning: importance scores, keep masks, structural rebuild of a
//! smaller [`CSNet`] and the train/prune/fine-tune pipeline.
//!
//! The pruning unit is a channel group: one output channel of a producing
//! convolution together with every per-channel tensor it flows through
//! (depthwise kernels, BatchNorm and PReLU parameters) up to the point where
//! channels mix again. Removing a channel drops its rows in the producers,
//! its entries in the per-channel tensors and its input columns in every
//! consumer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complexity::{count_flops, count_params, FlopConvention};
use crate::data::SaliencySample;
use crate::error::{config_err, Result};
use crate::goctconv::weight_name;
use crate::model::{block_prefix, scale_name, Architecture, CSNet, HeadArch, TensorMap, CSF_SCALES};
use crate::optim::DecayPolicy;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainReport};

/// Where the constant output of a removed channel is absorbed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldTarget {
    /// A BatchNorm directly after the consumer; its running mean absorbs it.
    RunningMean(String),
    /// The consumer's own bias.
    Bias(String),
}

/// A 1x1 convolution reading the group's channels at column `offset`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumer {
    pub weight: String,
    pub offset: usize,
    pub fold: FoldTarget,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    /// e.g. `stage2.block3`, `stem`, `csf.mid`, `csf.out`.
    pub layer: String,
    pub scale: usize,
    pub channels: usize,
    /// Full convolutions whose output rows are the group's channels.
    pub producers: Vec<String>,
    /// Depthwise kernels indexed by the group's channels.
    pub depthwise: Vec<String>,
    /// BatchNorm layers along the chain, in order.
    pub batch_norms: Vec<String>,
    /// PReLU layers along the chain, in order.
    pub activations: Vec<String>,
    pub consumers: Vec<Consumer>,
}

impl ChannelGroup {
    pub fn key(&self) -> (String, usize) {
        (self.layer.clone(), self.scale)
    }

    /// The BatchNorm that gates the group's output.
    pub fn last_bn(&self) -> &str {
        self.batch_norms.last().expect("group has a BatchNorm")
    }

    pub fn last_act(&self) -> &str {
        self.activations.last().expect("group has an activation")
    }

    fn per_channel_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for bn in &self.batch_norms {
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push(format!("{bn}.{s}"));
            }
        }
        for act in &self.activations {
            out.push(format!("{act}.slope"));
        }
        out
    }
}

fn block_at(arch: &Architecture, flat: usize) -> Option<((usize, usize), (usize, usize))> {
    let blocks = arch.blocks();
    blocks.get(flat).map(|(k, spec)| (*k, spec.split))
}

/// Consumers of a stage-1..4 block output at `scale`, given the block's
/// position in the flat block list.
fn block_consumers(arch: &Architecture, flat: usize, scale: usize) -> Vec<Consumer> {
    let ((s, b), split) = block_at(arch, flat).expect("block exists");
    let mut out = Vec::new();
    if let Some(((ns, nb), nsplit)) = block_at(arch, flat + 1) {
        let p = block_prefix(ns, nb);
        for (t, n) in [(1, nsplit.0), (2, nsplit.1)] {
            if n > 0 {
                out.push(Consumer {
                    weight: format!("{p}.oct.{}", weight_name(scale, t)),
                    offset: 0,
                    fold: FoldTarget::RunningMean(scale_name(&format!("{p}.bn0"), t)),
                });
            }
        }
    }
    let last_in_stage = b + 1 == arch.stages[s].len();
    if last_in_stage && s >= 1 {
        let offset = if scale == 1 { 0 } else { split.0 };
        match &arch.head {
            HeadArch::Csf { mid, .. } => {
                let from = CSF_SCALES[s - 1];
                for (j, &m) in mid.iter().enumerate() {
                    if m > 0 {
                        out.push(Consumer {
                            weight: format!("csf.in.{}", weight_name(from, CSF_SCALES[j])),
                            offset,
                            fold: FoldTarget::RunningMean(scale_name("csf.in_bn", CSF_SCALES[j])),
                        });
                    }
                }
            }
            HeadArch::Linear if s == 3 => out.push(Consumer {
                weight: "head.w".into(),
                offset,
                fold: FoldTarget::Bias("head.b".into()),
            }),
            HeadArch::Linear => {}
        }
    }
    out
}

/// Every prunable channel group of `arch`, in forward order.
pub fn channel_groups(arch: &Architecture) -> Vec<ChannelGroup> {
    let mut groups = Vec::new();
    let first = arch.blocks()[0].1.split;
    groups.push(ChannelGroup {
        layer: "stem".into(),
        scale: 1,
        channels: arch.stem,
        producers: vec!["stem.conv".into()],
        depthwise: vec![],
        batch_norms: vec!["stem.bn".into()],
        activations: vec!["stem.act".into()],
        consumers: [(1, first.0), (2, first.1)]
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(t, _)| Consumer {
                weight: format!("stage1.block1.oct.{}", weight_name(1, t)),
                offset: 0,
                fold: FoldTarget::RunningMean(scale_name("stage1.block1.bn0", t)),
            })
            .collect(),
    });
    for (flat, ((s, b), spec)) in arch.blocks().into_iter().enumerate() {
        let p = block_prefix(s, b);
        for (scale, n) in [(1, spec.split.0), (2, spec.split.1)] {
            if n == 0 {
                continue;
            }
            let producers = [(1, spec.input.0), (2, spec.input.1)]
                .into_iter()
                .filter(|&(_, c)| c > 0)
                .map(|(r, _)| format!("{p}.oct.{}", weight_name(r, scale)))
                .collect();
            groups.push(ChannelGroup {
                layer: p.clone(),
                scale,
                channels: n,
                producers,
                depthwise: (1..=2).map(|i| format!("{p}.dw{i}.{}", weight_name(scale, scale))).collect(),
                batch_norms: (0..3).map(|i| scale_name(&format!("{p}.bn{i}"), scale)).collect(),
                activations: (0..3).map(|i| scale_name(&format!("{p}.act{i}"), scale)).collect(),
                consumers: block_consumers(arch, flat, scale),
            });
        }
    }
    if let HeadArch::Csf { mid, out, dilations } = &arch.head {
        let taps: Vec<(usize, usize)> = (0..3).map(|i| (CSF_SCALES[i], arch.tap_channels(i + 1))).collect();
        for (j, &m) in mid.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let sc = CSF_SCALES[j];
            groups.push(ChannelGroup {
                layer: "csf.mid".into(),
                scale: sc,
                channels: m,
                producers: taps
                    .iter()
                    .filter(|t| t.1 > 0)
                    .map(|t| format!("csf.in.{}", weight_name(t.0, sc)))
                    .collect(),
                depthwise: dilations
                    .iter()
                    .map(|d| format!("csf.dil{d}.{}", weight_name(sc, sc)))
                    .collect(),
                batch_norms: vec![scale_name("csf.in_bn", sc), scale_name("csf.dil_bn", sc)],
                activations: vec![scale_name("csf.in_act", sc), scale_name("csf.dil_act", sc)],
                consumers: vec![Consumer {
                    weight: format!("csf.out.{}", weight_name(sc, 1)),
                    offset: 0,
                    fold: FoldTarget::RunningMean(scale_name("csf.out_bn", 1)),
                }],
            });
        }
        groups.push(ChannelGroup {
            layer: "csf.out".into(),
            scale: 1,
            channels: *out,
            producers: (0..3)
                .filter(|&j| mid[j] > 0)
                .map(|j| format!("csf.out.{}", weight_name(CSF_SCALES[j], 1)))
                .collect(),
            depthwise: vec![],
            batch_norms: vec![scale_name("csf.out_bn", 1)],
            activations: vec![scale_name("csf.out_act", 1)],
            consumers: vec![Consumer {
                weight: "csf.final.w".into(),
                offset: 0,
                fold: FoldTarget::Bias("csf.final.b".into()),
            }],
        });
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `|gamma|` of the group's last BatchNorm.
    BnGamma,
    /// L1 norm of the channel's producing filter.
    L1Norm,
    /// Distance of the producing filter from the layer's geometric median.
    GeometricMedian,
}

impl std::str::FromStr for Criterion {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bn_gamma" => Ok(Criterion::BnGamma),
            "l1_norm" => Ok(Criterion::L1Norm),
            "geometric_median" => Ok(Criterion::GeometricMedian),
            other => Err(config_err!(
                "unknown criterion {other:?}; expected bn_gamma, l1_norm or geometric_median"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub layer: String,
    pub scale: usize,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
}

fn param<'a>(model: &'a CSNet, name: &str) -> Result<&'a Tensor> {
    model
        .params
        .get(name)
        .ok_or_else(|| config_err!("missing parameter {name}"))
}

/// One row per channel: the group's producing filters concatenated.
fn filter_rows(model: &CSNet, group: &ChannelGroup) -> Result<Vec<Vec<f64>>> {
    let mut rows = vec![Vec::new(); group.channels];
    for name in &group.producers {
        let t = param(model, name)?;
        if t.shape()[0] != group.channels {
            return Err(config_err!(
                "{name} has {} rows, group {}.s{} has {} channels",
                t.shape()[0],
                group.layer,
                group.scale,
                group.channels
            ));
        }
        let per = t.numel() / group.channels;
        for (c, chunk) in t.data().chunks_exact(per).enumerate() {
            rows[c].extend_from_slice(chunk);
        }
    }
    Ok(rows)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Weiszfeld iteration for the point minimising the summed Euclidean
/// distance to `points`.
pub fn geometric_median(points: &[Vec<f64>], tol: f64, max_iter: usize) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let n = points.len().max(1) as f64;
    let mut y: Vec<f64> = (0..dim).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    for _ in 0..max_iter {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        let mut coincident = None;
        for (i, p) in points.iter().enumerate() {
            let d = distance(p, &y);
            if d < 1e-15 {
                coincident = Some(i);
                continue;
            }
            for k in 0..dim {
                num[k] += p[k] / d;
            }
            den += 1.0 / d;
        }
        let next: Vec<f64> = if den == 0.0 {
            y.clone()
        } else {
            let t: Vec<f64> = num.iter().map(|v| v / den).collect();
            match coincident {
                // Vardi-Zhang step: stay at the data point if it is optimal
                Some(i) => {
                    let r: Vec<f64> = (0..dim).map(|k| (t[k] - y[k]) * den).collect();
                    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if rn <= 1.0 {
                        points[i].clone()
                    } else {
                        let w = 1.0 / rn;
                        (0..dim).map(|k| (1.0 - w) * t[k] + w * y[k]).collect()
                    }
                }
                None => t,
            }
        };
        let moved = distance(&next, &y);
        y = next;
        if moved < tol {
            break;
        }
    }
    y
}

pub const MEDIAN_TOL: f64 = 1e-8;

pub fn score_group(model: &CSNet, group: &ChannelGroup, criterion: Criterion) -> Result<Vec<f64>> {
    match criterion {
        Criterion::BnGamma => Ok(param(model, &format!("{}.gamma", group.last_bn()))?
            .data()
            .iter()
            .map(|g| g.abs())
            .collect()),
        Criterion::L1Norm => Ok(filter_rows(model, group)?
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect()),
        Criterion::GeometricMedian => {
            let rows = filter_rows(model, group)?;
            let m = geometric_median(&rows, MEDIAN_TOL, 10_000);
            Ok(rows.iter().map(|r| distance(r, &m)).collect())
        }
    }
}

pub fn score_channels(model: &CSNet, criterion: Criterion) -> Result<Vec<ChannelImportance>> {
    channel_groups(&model.arch)
        .iter()
        .map(|g| {
            Ok(ChannelImportance {
                layer: g.layer.clone(),
                scale: g.scale,
                criterion,
                scores: score_group(model, g, criterion)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep a channel iff its score is at least the threshold.
    Threshold(f64),
    /// Remove this fraction of each layer-scale's channels, lowest scores
    /// first.
    Fraction(f64),
}

/// Keep masks keyed by `(layer, scale)`.
pub type KeepMasks = BTreeMap<(String, usize), Vec<bool>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionResult {
    pub masks: KeepMasks,
    /// Layers that would have lost every channel; their best channel was kept.
    pub flagged: Vec<String>,
}

pub fn select_prunable(scores: &[ChannelImportance], rule: Selection) -> Result<SelectionResult> {
    match rule {
        Selection::Threshold(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(config_err!("threshold must be positive, got {t}"))
        }
        Selection::Fraction(f) if !(0.0..1.0).contains(&f) => {
            return Err(config_err!("fraction must be in [0, 1), got {f}"))
        }
        _ => {}
    }
    let mut out = SelectionResult::default();
    for imp in scores {
        let mask = match rule {
            Selection::Threshold(t) => imp.scores.iter().map(|&s| s >= t).collect(),
            Selection::Fraction(f) => {
                let n = imp.scores.len();
                let remove = ((n as f64) * f).floor() as usize;
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| imp.scores[a].total_cmp(&imp.scores[b]).then(a.cmp(&b)));
                let mut mask = vec![true; n];
                for &i in &idx[..remove] {
                    mask[i] = false;
                }
                mask
            }
        };
        out.masks.insert((imp.layer.clone(), imp.scale), mask);
    }
    // a layer must keep at least one channel across its scales
    let mut layers: BTreeMap<&str, Vec<&ChannelImportance>> = BTreeMap::new();
    for imp in scores {
        layers.entry(&imp.layer).or_default().push(imp);
    }
    for (layer, imps) in layers {
        let any = imps.iter().any(|i| out.masks[&(i.layer.clone(), i.scale)].iter().any(|&k| k));
        if any {
            continue;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for imp in &imps {
            for (c, &s) in imp.scores.iter().enumerate() {
                if best.is_none_or(|b| s > b.2) {
                    best = Some((imp.scale, c, s));
                }
            }
        }
        if let Some((scale, c, _)) = best {
            out.masks.get_mut(&(layer.to_string(), scale)).expect("mask")[c] = true;
            out.flagged.push(layer.to_string());
        }
    }
    Ok(out)
}

/// Masks that keep every channel of `arch`.
pub fn full_masks(arch: &Architecture) -> KeepMasks {
    channel_groups(arch)
        .into_iter()
        .map(|g| (g.key(), vec![true; g.channels]))
        .collect()
}

fn check_masks(groups: &[ChannelGroup], masks: &KeepMasks) -> Result<()> {
    for g in groups {
        let m = masks
            .get(&g.key())
            .ok_or_else(|| config_err!("no keep mask for {}.s{}", g.layer, g.scale))?;
        if m.len() != g.channels {
            return Err(config_err!(
                "keep mask for {}.s{} has {} entries, layer has {} channels",
                g.layer,
                g.scale,
                m.len(),
                g.channels
            ));
        }
    }
    if masks.len() != groups.len() {
        let known: Vec<_> = groups.iter().map(ChannelGroup::key).collect();
        let stray = masks.keys().find(|k| !known.contains(k)).expect("extra key");
        return Err(config_err!("keep mask for unknown layer {}.s{}", stray.0, stray.1));
    }
    let mut kept: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *kept.entry(&g.layer).or_default() += masks[&g.key()].iter().filter(|&&k| k).count();
    }
    if let Some((layer, _)) = kept.iter().find(|(_, &n)| n == 0) {
        return Err(config_err!("keep masks remove every channel of {layer}"));
    }
    Ok(())
}

fn kept_count(masks: &KeepMasks, layer: &str, scale: usize) -> usize {
    masks
        .get(&(layer.to_string(), scale))
        .map_or(0, |m| m.iter().filter(|&&k| k).count())
}

fn compact_architecture(arch: &Architecture, masks: &KeepMasks) -> Architecture {
    let stages = arch
        .stages
        .iter()
        .enumerate()
        .map(|(s, st)| {
            (0..st.len())
                .map(|b| {
                    let p = block_prefix(s, b);
                    (kept_count(masks, &p, 1), kept_count(masks, &p, 2))
                })
                .collect()
        })
        .collect();
    let head = match &arch.head {
        HeadArch::Csf { dilations, .. } => HeadArch::Csf {
            mid: CSF_SCALES.map(|s| kept_count(masks, "csf.mid", s)),
            out: kept_count(masks, "csf.out", 1),
            dilations: dilations.clone(),
        },
        HeadArch::Linear => HeadArch::Linear,
    };
    Architecture {
        stem: kept_count(masks, "stem", 1),
        stages,
        head,
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Removes masked channels. The constant output `prelu(beta)` of a removed
/// channel whose last `|beta|` exceeds [`FOLD_THRESHOLD`] is folded into the
/// consumer's BatchNorm running mean or bias first.
pub fn rebuild(model: &CSNet, masks: &KeepMasks) -> Result<CSNet> {
    let groups = channel_groups(&model.arch);
    check_masks(&groups, masks)?;
    let mut params = model.params.clone();
    let mut buffers = model.buffers.clone();

    for g in &groups {
        fold_removed(model, g, &masks[&g.key()], &mut params, &mut buffers)?;
    }

    let mut rows: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut cols: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for g in &groups {
        let mask = &masks[&g.key()];
        for name in g.producers.iter().chain(&g.depthwise).chain(&g.per_channel_names()) {
            rows.insert(name.clone(), mask.clone());
        }
        for c in &g.consumers {
            let t = params
                .get(&c.weight)
                .ok_or_else(|| config_err!("missing consumer {}", c.weight))?;
            let col = cols.entry(c.weight.clone()).or_insert_with(|| vec![true; t.shape()[1]]);
            if c.offset + mask.len() > col.len() {
                return Err(config_err!("consumer {} is narrower than its inputs", c.weight));
            }
            for (i, &k) in mask.iter().enumerate() {
                col[c.offset + i] &= k;
            }
        }
    }

    let arch = compact_architecture(&model.arch, masks);
    let mut new_params = TensorMap::new();
    let mut new_buffers = TensorMap::new();
    for slot in arch.layout() {
        let src = params
            .get(&slot.name)
            .or_else(|| buffers.get(&slot.name))
            .ok_or_else(|| config_err!("missing tensor {}", slot.name))?;
        let mut t = src.clone();
        if let Some(m) = rows.get(&slot.name) {
            t = t.select_axis(0, &indices(m))?;
        }
        if let Some(m) = cols.get(&slot.name) {
            t = t.select_axis(1, &indices(m))?;
        }
        let dest = if model.params.contains_key(&slot.name) { &mut new_params } else { &mut new_buffers };
        dest.insert(slot.name.clone(), t);
    }
    let compact = CSNet {
        config: model.config.clone(),
        arch,
        params: new_params,
        buffers: new_buffers,
    };
    compact.validate()?;
    Ok(compact)
}

pub const FOLD_THRESHOLD: f64 = 1e-4;

fn prelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn fold_removed(
    model: &CSNet,
    g: &ChannelGroup,
    mask: &[bool],
    params: &mut TensorMap,
    buffers: &mut TensorMap,
) -> Result<()> {
    let beta = param(model, &format!("{}.beta", g.last_bn()))?;
    let slope = param(model, &format!("{}.slope", g.last_act()))?;
    let values: Vec<(usize, f64)> = mask
        .iter()
        .enumerate()
        .filter(|&(c, &k)| !k && beta.data()[c].abs() > FOLD_THRESHOLD)
        .map(|(c, _)| (c, prelu(beta.data()[c], slope.data()[c])))
        .collect();
    if values.is_empty() {
        return Ok(());
    }
    for cons in &g.consumers {
        let w = param(model, &cons.weight)?;
        let (o, cin) = (w.shape()[0], w.shape()[1]);
        if w.shape()[2] * w.shape()[3] != 1 {
            return Err(config_err!("cannot fold into non-1x1 consumer {}", cons.weight));
        }
        let shift: Vec<f64> = (0..o)
            .map(|r| {
                values
                    .iter()
                    .map(|&(c, v)| w.data()[r * cin + cons.offset + c] * v)
                    .sum()
            })
            .collect();
        match &cons.fold {
            FoldTarget::RunningMean(bn) => {
                let rm = buffers
                    .get_mut(&format!("{bn}.running_mean"))
                    .ok_or_else(|| config_err!("missing running mean of {bn}"))?;
                for (m, s) in rm.data_mut().iter_mut().zip(&shift) {
                    *m -= s;
                }
            }
            FoldTarget::Bias(b) => {
                let bias = params
                    .get_mut(b)
                    .ok_or_else(|| config_err!("missing bias {b}"))?;
                for (m, s) in bias.data_mut().iter_mut().zip(&shift) {
                    *m += s;
                }
            }
        }
    }
    Ok(())
}

/// The original model with removed channels silenced in place: the last
/// BatchNorm scale is zeroed, leaving the constant `prelu(beta)` that
/// [`rebuild`] folds away. Shifts at or below [`FOLD_THRESHOLD`] are zeroed
/// too, since `rebuild` drops them.
pub fn zero_masked(model: &CSNet, masks: &KeepMasks) -> Result<CSNet> {
    let groups = channel_groups(&model.arch);
    check_masks(&groups, masks)?;
    let mut out = model.clone();
    for g in &groups {
        let mask = &masks[&g.key()];
        let bn = g.last_bn();
        let gamma = out
            .params
            .get_mut(&format!("{bn}.gamma"))
            .ok_or_else(|| config_err!("missing {bn}.gamma"))?;
        for (c, &k) in mask.iter().enumerate() {
            if !k {
                gamma.data_mut()[c] = 0.0;
            }
        }
        let beta = out
            .params
            .get_mut(&format!("{bn}.beta"))
            .ok_or_else(|| config_err!("missing {bn}.beta"))?;
        for (c, &k) in mask.iter().enumerate() {
            if !k && beta.data()[c].abs() <= FOLD_THRESHOLD {
                beta.data_mut()[c] = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: String,
    pub scale: usize,
    pub kept: usize,
    pub removed: usize,
    pub keep_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub criterion: Criterion,
    pub selection: Selection,
    pub layers: Vec<LayerPrune>,
    pub flagged: Vec<String>,
    pub architecture: Architecture,
    pub params_before: u64,
    pub params_after: u64,
    /// Input size the FLOP figures refer to.
    pub flops_input: (usize, usize),
    pub flops_before: u64,
    pub flops_after: u64,
    pub param_pruning_rate: f64,
    pub flop_pruning_rate: f64,
}

impl PruneReport {
    pub fn new(
        original: &Architecture,
        compact: &Architecture,
        criterion: Criterion,
        selection: Selection,
        result: &SelectionResult,
        flops_input: (usize, usize),
    ) -> Result<Self> {
        let layers = channel_groups(original)
            .iter()
            .map(|g| {
                let m = result.masks.get(&g.key()).cloned().unwrap_or_default();
                let kept = m.iter().filter(|&&k| k).count();
                LayerPrune {
                    layer: g.layer.clone(),
                    scale: g.scale,
                    kept,
                    removed: m.len() - kept,
                    keep_mask: m,
                }
            })
            .collect();
        let (pb, pa) = (count_params(original), count_params(compact));
        let fb = count_flops(original, flops_input, FlopConvention::Macs)?.flops;
        let fa = count_flops(compact, flops_input, FlopConvention::Macs)?.flops;
        Ok(PruneReport {
            criterion,
            selection,
            layers,
            flagged: result.flagged.clone(),
            architecture: compact.clone(),
            params_before: pb,
            params_after: pa,
            flops_input,
            flops_before: fb,
            flops_after: fa,
            param_pruning_rate: 1.0 - pa as f64 / pb as f64,
            flop_pruning_rate: 1.0 - fa as f64 / fb as f64,
        })
    }

    /// `layer,scale,kept,removed` rows.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "layer,scale,kept,removed")?;
        for l in &self.layers {
            writeln!(f, "{},{},{},{}", l.layer, l.scale, l.kept, l.removed)?;
        }
        Ok(())
    }
}

/// Scores, selects and rebuilds without training.
pub fn prune(
    model: &CSNet,
    criterion: Criterion,
    selection: Selection,
    flops_input: (usize, usize),
) -> Result<(CSNet, PruneReport)> {
    let scores = score_channels(model, criterion)?;
    let result = select_prunable(&scores, selection)?;
    let compact = rebuild(model, &result.masks)?;
    let report = PruneReport::new(&model.arch, &compact.arch, criterion, selection, &result, flops_input)?;
    Ok((compact, report))
}

/// Fine-tuning schedule: `finetune_epochs` at the schedule's final rate,
/// with standard decay only.
pub fn finetune_setup(cfg: &TrainConfig, policy: &DecayPolicy) -> (TrainConfig, DecayPolicy) {
    let lr = cfg.lr_at(cfg.epochs.saturating_sub(1));
    let ft = TrainConfig {
        epochs: cfg.finetune_epochs,
        lr,
        lr_drop_epochs: vec![],
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let p = DecayPolicy {
        lambda_dyn: 0.0,
        dynamic_targets: Default::default(),
        ..policy.clone()
    };
    (ft, p)
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: CSNet,
    pub report: PruneReport,
    pub training: Option<TrainReport>,
    pub finetune: TrainReport,
}

/// Prunes an already trained model and fine-tunes the result.
pub fn prune_and_finetune(
    model: &CSNet,
    data: &[SaliencySample],
    cfg: &TrainConfig,
    policy: &DecayPolicy,
    criterion: Criterion,
    selection: Selection,
    flops_input: (usize, usize),
) -> Result<PipelineOutcome> {
    let (mut compact, report) = prune(model, criterion, selection, flops_input)?;
    let (ft_cfg, ft_policy) = finetune_setup(cfg, policy);
    let finetune = train(&mut compact, data, &ft_cfg, &ft_policy)?;
    Ok(PipelineOutcome {
        model: compact,
        report,
        training: None,
        finetune,
    })
}

/// Train, score, select, rebuild and fine-tune.
pub fn prune_pipeline(
    model: &mut CSNet,
    data: &[SaliencySample],
    cfg: &TrainConfig,
    policy: &DecayPolicy,
    criterion: Criterion,
    selection: Selection,
    flops_input: (usize, usize),
) -> Result<PipelineOutcome> {
    let training = train(model, data, cfg, policy)?;
    let mut out = prune_and_finetune(model, data, cfg, policy, criterion, selection, flops_input)?;
    out.training = Some(training);
    Ok(out)
}
