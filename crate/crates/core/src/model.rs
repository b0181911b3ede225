//! CSNet: a stem, four stages of ILBlocks and a cross-stage fusion head.
//!
//! Parameters live in a flat name-keyed map. [`Architecture::layout`]
//! enumerates every tensor the forward pass reads, so initialisation,
//! counting, checkpoints and pruning all agree on names and shapes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::goctconv::{goctconv_graph, standard_normal, vanilla_spec, weight_name, GOctConvSpec, MsVar, ScaleSpec};
use crate::graph::{sigmoid, BatchStats, Graph, Var};
use crate::kernels::ConvParams;
use crate::ops::{update_running, BN_EPS, BN_MOMENTUM};
use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor>;

pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 4];
/// Stem stride times one halving per stage after the first, times the low
/// branch of the last stage.
pub const TOTAL_STRIDE: usize = 32;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Cross-stage fusion over the last three stages.
    Csf,
    /// A single 1x1 conv on the last stage; the bare extractor.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CSNetConfig {
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub width_multiplier: f64,
    /// High:low ratio used for every ILBlock, e.g. `[1, 1]` or `[3, 1]`.
    pub split: [usize; 2],
    pub csf_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub head: HeadKind,
}

impl Default for CSNetConfig {
    fn default() -> Self {
        CSNetConfig {
            stage_widths: [32, 64, 112, 112],
            stage_depths: STAGE_DEPTHS,
            width_multiplier: 1.0,
            split: [1, 1],
            csf_channels: 32,
            dilation_rates: vec![1, 2, 4, 8],
            head: HeadKind::Csf,
        }
    }
}

/// Splits `channels` by the ratio `high:low`, rounding the high share.
pub fn split_channels(channels: usize, ratio: [usize; 2]) -> (usize, usize) {
    let total = ratio[0] + ratio[1];
    let high = ((channels * ratio[0]) as f64 / total as f64).round() as usize;
    (high, channels - high)
}

impl CSNetConfig {
    pub fn extractor() -> Self {
        CSNetConfig {
            head: HeadKind::Linear,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths != STAGE_DEPTHS {
            return Err(config_err!(
                "stage_depths must be {:?}, got {:?}",
                STAGE_DEPTHS,
                self.stage_depths
            ));
        }
        let w = self.stage_widths;
        if w.iter().any(|&c| c == 0) || w.windows(2).any(|p| p[0] > p[1]) || w[2] != w[3] {
            return Err(config_err!(
                "stage_widths must be positive, nondecreasing and end with two equal widths, got {w:?}"
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier >= 1.0) {
            return Err(config_err!("width_multiplier must be >= 1, got {}", self.width_multiplier));
        }
        if self.split[0] + self.split[1] == 0 {
            return Err(config_err!("split ratio 0/0 leaves no channels"));
        }
        if self.head == HeadKind::Csf {
            if self.csf_channels == 0 {
                return Err(config_err!("csf_channels must be >= 1"));
            }
            if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
                return Err(config_err!("dilation_rates must be non-empty and >= 1"));
            }
        }
        Ok(())
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn effective_widths(&self) -> [usize; 4] {
        self.stage_widths.map(|c| self.scaled(c))
    }
}

/// Channel counts of one ILBlock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ILBlockSpec {
    /// `(high, low)` channels entering the block.
    pub input: (usize, usize),
    /// `(high, low)` channels the block produces.
    pub split: (usize, usize),
}

impl ILBlockSpec {
    pub fn channels(&self) -> usize {
        self.split.0 + self.split.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() == 0 || self.input.0 + self.input.1 == 0 {
            return Err(config_err!("ILBlock with no channels"));
        }
        Ok(())
    }

    pub fn oct_spec(&self) -> GOctConvSpec {
        vanilla_spec(self.input, self.split, 1)
    }

    pub fn dw_spec(&self) -> GOctConvSpec {
        GOctConvSpec::depthwise(two_scales(self.split), 3, 1)
    }
}

fn two_scales(split: (usize, usize)) -> Vec<ScaleSpec> {
    vec![ScaleSpec::new(1, split.0), ScaleSpec::new(2, split.1)]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    Csf {
        /// Channels per fusion scale (taps of stages 2, 3, 4).
        mid: [usize; 3],
        out: usize,
        dilations: Vec<usize>,
    },
    Linear,
}

/// Concrete channel counts of a (possibly pruned) network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub stem: usize,
    /// Output `(high, low)` split of every block, per stage.
    pub stages: Vec<Vec<(usize, usize)>>,
    pub head: HeadArch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He(usize),
    /// Normal with std `sqrt(1 / fan_in)`; used before the sigmoid.
    Lecun(usize),
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: SlotKind,
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{}.block{}", stage + 1, block + 1)
}

/// Scale-suffixed name of a per-branch layer.
pub fn scale_name(prefix: &str, scale: usize) -> String {
    format!("{prefix}.s{scale}")
}

pub const CSF_SCALES: [usize; 3] = [1, 2, 4];

impl Architecture {
    pub fn from_config(cfg: &CSNetConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.effective_widths();
        let stages = widths
            .iter()
            .zip(cfg.stage_depths)
            .map(|(&c, d)| vec![split_channels(c, cfg.split); d])
            .collect();
        let head = match cfg.head {
            HeadKind::Csf => {
                let c = cfg.scaled(cfg.csf_channels);
                HeadArch::Csf {
                    mid: [c; 3],
                    out: c,
                    dilations: cfg.dilation_rates.clone(),
                }
            }
            HeadKind::Linear => HeadArch::Linear,
        };
        Ok(Architecture {
            stem: widths[0],
            stages,
            head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem == 0 || self.stages.len() != 4 {
            return Err(config_err!("architecture needs a stem and four stages"));
        }
        for spec in self.blocks() {
            spec.1.validate()?;
        }
        if let HeadArch::Csf { mid, out, dilations } = &self.head {
            if mid.iter().all(|&m| m == 0) || *out == 0 || dilations.is_empty() {
                return Err(config_err!("fusion head with no channels"));
            }
        }
        Ok(())
    }

    /// `((stage, block), spec)` for every ILBlock in order.
    pub fn blocks(&self) -> Vec<((usize, usize), ILBlockSpec)> {
        let mut prev = (self.stem, 0);
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, &split) in stage.iter().enumerate() {
                out.push(((s, b), ILBlockSpec { input: prev, split }));
                prev = split;
            }
        }
        out
    }

    pub fn stage_output(&self, stage: usize) -> (usize, usize) {
        *self.stages[stage].last().expect("stage has blocks")
    }

    /// Channels of the single-tensor tap of `stage` (high then upsampled low).
    pub fn tap_channels(&self, stage: usize) -> usize {
        let (h, l) = self.stage_output(stage);
        h + l
    }

    pub fn csf_in_spec(&self) -> Option<GOctConvSpec> {
        match &self.head {
            HeadArch::Csf { mid, .. } => Some(GOctConvSpec::full(
                (0..3).map(|i| ScaleSpec::new(CSF_SCALES[i], self.tap_channels(i + 1))).collect(),
                (0..3).map(|i| ScaleSpec::new(CSF_SCALES[i], mid[i])).collect(),
                1,
            )),
            HeadArch::Linear => None,
        }
    }

    pub fn csf_dil_spec(&self, dilation: usize) -> Option<GOctConvSpec> {
        match &self.head {
            HeadArch::Csf { mid, .. } => Some(GOctConvSpec::depthwise(
                (0..3).map(|i| ScaleSpec::new(CSF_SCALES[i], mid[i])).collect(),
                3,
                dilation,
            )),
            HeadArch::Linear => None,
        }
    }

    pub fn csf_out_spec(&self) -> Option<GOctConvSpec> {
        match &self.head {
            HeadArch::Csf { mid, out, .. } => Some(GOctConvSpec::full(
                (0..3).map(|i| ScaleSpec::new(CSF_SCALES[i], mid[i])).collect(),
                vec![ScaleSpec::new(1, *out)],
                1,
            )),
            HeadArch::Linear => None,
        }
    }

    /// Every parameter and buffer the forward pass reads.
    pub fn layout(&self) -> Vec<Slot> {
        let mut l = Layout::default();
        l.conv("stem.conv", vec![self.stem, 3, 3, 3], Init::He(27));
        l.bn_act("stem.bn", "stem.act", self.stem);
        for ((s, b), spec) in self.blocks() {
            l.block(&block_prefix(s, b), &spec);
        }
        match &self.head {
            HeadArch::Csf { out, dilations, .. } => {
                let in_spec = self.csf_in_spec().expect("csf");
                l.goct("csf.in", &in_spec);
                l.ms_bn_act("csf.in_bn", "csf.in_act", &in_spec.out_scales);
                for &d in dilations {
                    l.goct(&format!("csf.dil{d}"), &self.csf_dil_spec(d).expect("csf"));
                }
                l.ms_bn_act("csf.dil_bn", "csf.dil_act", &in_spec.out_scales);
                let out_spec = self.csf_out_spec().expect("csf");
                l.goct("csf.out", &out_spec);
                l.ms_bn_act("csf.out_bn", "csf.out_act", &out_spec.out_scales);
                l.conv("csf.final.w", vec![1, *out, 1, 1], Init::Lecun(*out));
                l.param("csf.final.b", vec![1], Init::Const(0.0));
            }
            HeadArch::Linear => {
                let c = self.tap_channels(3);
                l.conv("head.w", vec![1, c, 1, 1], Init::Lecun(c));
                l.param("head.b", vec![1], Init::Const(0.0));
            }
        }
        l.slots
    }

    /// Names of all BatchNorm layers, in forward order.
    pub fn bn_layers(&self) -> Vec<String> {
        self.layout()
            .iter()
            .filter_map(|s| s.name.strip_suffix(".gamma").map(str::to_string))
            .collect()
    }
}

#[derive(Default)]
struct Layout {
    slots: Vec<Slot>,
}

impl Layout {
    fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.slots.push(Slot {
            name: name.to_string(),
            shape,
            init,
            kind: SlotKind::Param,
        });
    }

    fn buffer(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.slots.push(Slot {
            name: name.to_string(),
            shape,
            init,
            kind: SlotKind::Buffer,
        });
    }

    fn conv(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.param(name, shape, init);
    }

    fn bn_act(&mut self, bn: &str, act: &str, c: usize) {
        self.param(&format!("{bn}.gamma"), vec![c], Init::Const(1.0));
        self.param(&format!("{bn}.beta"), vec![c], Init::Const(0.0));
        self.buffer(&format!("{bn}.running_mean"), vec![c], Init::Const(0.0));
        self.buffer(&format!("{bn}.running_var"), vec![c], Init::Const(1.0));
        self.param(&format!("{act}.slope"), vec![c], Init::Const(PRELU_INIT));
    }

    fn ms_bn_act(&mut self, bn: &str, act: &str, scales: &[ScaleSpec]) {
        for s in scales.iter().filter(|s| s.channels > 0) {
            self.bn_act(&scale_name(bn, s.scale_factor), &scale_name(act, s.scale_factor), s.channels);
        }
    }

    fn block(&mut self, p: &str, spec: &ILBlockSpec) {
        self.goct(&format!("{p}.oct"), &spec.oct_spec());
        self.ms_bn_act(&format!("{p}.bn0"), &format!("{p}.act0"), &two_scales(spec.split));
        for i in 1..=2 {
            self.goct(&format!("{p}.dw{i}"), &spec.dw_spec());
            self.ms_bn_act(&format!("{p}.bn{i}"), &format!("{p}.act{i}"), &two_scales(spec.split));
        }
    }

    fn goct(&mut self, prefix: &str, spec: &GOctConvSpec) {
        let mut fan_in: BTreeMap<usize, usize> = BTreeMap::new();
        for (r, s) in spec.paths() {
            let shape = spec.weight_shape(&r, &s);
            *fan_in.entry(s.scale_factor).or_default() += shape[1] * shape[2] * shape[3];
        }
        for (r, s) in spec.paths() {
            self.param(
                &format!("{prefix}.{}", weight_name(r.scale_factor, s.scale_factor)),
                spec.weight_shape(&r, &s).to_vec(),
                Init::He(fan_in[&s.scale_factor]),
            );
        }
    }
}

/// Layout of a lone ILBlock under `prefix`.
pub fn ilblock_layout(prefix: &str, spec: &ILBlockSpec) -> Vec<Slot> {
    let mut l = Layout::default();
    l.block(prefix, spec);
    l.slots
}

/// Draws every slot from its initialiser; returns `(params, buffers)`.
pub fn init_slots(slots: &[Slot], seed: u64) -> (TensorMap, TensorMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TensorMap::new();
    let mut buffers = TensorMap::new();
    for slot in slots {
        let t = sample(slot.init, &slot.shape, &mut rng);
        match slot.kind {
            SlotKind::Param => params.insert(slot.name.clone(), t),
            SlotKind::Buffer => buffers.insert(slot.name.clone(), t),
        };
    }
    (params, buffers)
}

/// Parameters, BatchNorm buffers and the structure they instantiate.
#[derive(Clone, Debug, PartialEq)]
pub struct CSNet {
    pub config: CSNetConfig,
    pub arch: Architecture,
    pub params: TensorMap,
    pub buffers: TensorMap,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// BatchNorm outputs keyed by layer name, in forward order.
    pub bn_outputs: Vec<(String, Var)>,
    /// Batch statistics of every BatchNorm (training mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
    /// `stage{2,3,4}.out` single-tensor taps.
    pub taps: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyOutput {
    pub logits: Tensor,
}

impl SaliencyOutput {
    pub fn probabilities(&self) -> Tensor {
        self.logits.map(sigmoid)
    }
}

fn sample(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Const(v) => Tensor::full(shape, v),
        Init::He(fan) | Init::Lecun(fan) => {
            let gain = if matches!(init, Init::He(_)) { 2.0 } else { 1.0 };
            let std = (gain / fan.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| std * standard_normal(rng))
        }
    }
}

impl CSNet {
    pub fn new(config: &CSNetConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::from_config(config)?;
        Self::with_architecture(config.clone(), arch, seed)
    }

    pub fn with_architecture(config: CSNetConfig, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (params, buffers) = init_slots(&arch.layout(), seed);
        Ok(CSNet {
            config,
            arch,
            params,
            buffers,
        })
    }

    /// Checks that the stored tensors match the architecture's layout exactly.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let layout = self.arch.layout();
        let (mut np, mut nb) = (0, 0);
        for slot in &layout {
            let map = match slot.kind {
                SlotKind::Param => {
                    np += 1;
                    &self.params
                }
                SlotKind::Buffer => {
                    nb += 1;
                    &self.buffers
                }
            };
            let t = map
                .get(&slot.name)
                .ok_or_else(|| config_err!("missing tensor {}", slot.name))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(config_err!(
                    "tensor {} has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                ));
            }
        }
        if np != self.params.len() || nb != self.buffers.len() {
            return Err(config_err!("model holds tensors the architecture does not use"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        image: Var,
        training: bool,
    ) -> Result<ForwardPass> {
        let mut ctx = Ctx {
            g,
            vars,
            buffers: &self.buffers,
            training,
            bn_outputs: Vec::new(),
            batch_stats: Vec::new(),
        };
        let (logits, taps) = network_forward(&mut ctx, &self.arch, image)?;
        Ok(ForwardPass {
            logits,
            bn_outputs: ctx.bn_outputs,
            batch_stats: ctx.batch_stats,
            taps,
        })
    }

    /// Inference-mode prediction.
    pub fn predict(&self, images: &Tensor) -> Result<SaliencyOutput> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, &vars, x, false)?;
        Ok(SaliencyOutput {
            logits: g.value(pass.logits).clone(),
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, st) in stats {
            let mut mean = self.take_buffer(&format!("{name}.running_mean"))?;
            let mut var = self.take_buffer(&format!("{name}.running_var"))?;
            update_running(mean.data_mut(), var.data_mut(), st, BN_MOMENTUM);
            self.buffers.insert(format!("{name}.running_mean"), mean);
            self.buffers.insert(format!("{name}.running_var"), var);
        }
        Ok(())
    }

    fn take_buffer(&mut self, name: &str) -> Result<Tensor> {
        self.buffers
            .remove(name)
            .ok_or_else(|| config_err!("missing buffer {name}"))
    }

    /// BatchNorm scale parameters governed by the dynamic decay: every
    /// BatchNorm except the stem's.
    pub fn dynamic_targets(&self) -> Vec<String> {
        self.arch
            .bn_layers()
            .into_iter()
            .filter(|n| !n.starts_with("stem."))
            .map(|n| format!("{n}.gamma"))
            .collect()
    }
}

/// Forward-pass state shared by the layer helpers.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a BTreeMap<String, Var>,
    pub buffers: &'a TensorMap,
    pub training: bool,
    pub bn_outputs: Vec<(String, Var)>,
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| config_err!("missing parameter {name}"))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| config_err!("missing buffer {name}"))
    }

    fn bn_act(&mut self, bn: &str, act: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{bn}.gamma"))?;
        let beta = self.var(&format!("{bn}.beta"))?;
        let y = if self.training {
            let (y, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.batch_stats.push((bn.to_string(), stats));
            y
        } else {
            let rm = self.buffer(&format!("{bn}.running_mean"))?.data().to_vec();
            let rv = self.buffer(&format!("{bn}.running_var"))?.data().to_vec();
            self.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)?
        };
        self.bn_outputs.push((bn.to_string(), y));
        let slope = self.var(&format!("{act}.slope"))?;
        self.g.prelu(y, slope)
    }

    fn ms_bn_act(&mut self, bn: &str, act: &str, x: &MsVar) -> Result<MsVar> {
        let mut entries = Vec::with_capacity(x.entries.len());
        for &(s, v) in &x.entries {
            entries.push((s, self.bn_act(&scale_name(bn, s), &scale_name(act, s), v)?));
        }
        MsVar::new(self.g, x.reference, entries)
    }

    fn goct(&mut self, prefix: &str, x: &MsVar, spec: &GOctConvSpec) -> Result<MsVar> {
        let mut w = BTreeMap::new();
        for (r, s) in spec.paths() {
            let key = (r.scale_factor, s.scale_factor);
            w.insert(key, self.var(&format!("{prefix}.{}", weight_name(key.0, key.1)))?);
        }
        goctconv_graph(self.g, x, spec, &w)
    }
}

/// Records one ILBlock; `prefix` is e.g. `stage1.block1`.
pub fn ilblock_graph(ctx: &mut Ctx, prefix: &str, x: &MsVar, spec: &ILBlockSpec) -> Result<MsVar> {
    spec.validate()?;
    let got = (
        x.get(1).map_or(0, |v| ctx.g.shape(v)[1]),
        x.get(2).map_or(0, |v| ctx.g.shape(v)[1]),
    );
    if got != spec.input || x.entries.iter().any(|(s, _)| *s > 2) {
        return Err(config_err!(
            "{prefix}: input channels {:?} do not match block input {:?}",
            got,
            spec.input
        ));
    }
    let y = ctx.goct(&format!("{prefix}.oct"), x, &spec.oct_spec())?;
    let mut y = ctx.ms_bn_act(&format!("{prefix}.bn0"), &format!("{prefix}.act0"), &y)?;
    for i in 1..=2 {
        let z = ctx.goct(&format!("{prefix}.dw{i}"), &y, &spec.dw_spec())?;
        y = ctx.ms_bn_act(&format!("{prefix}.bn{i}"), &format!("{prefix}.act{i}"), &z)?;
    }
    Ok(y)
}

/// Value-level ILBlock over tensors named under `prefix`.
pub fn ilblock_forward(
    x: &crate::goctconv::MultiScaleFeature,
    spec: &ILBlockSpec,
    prefix: &str,
    params: &TensorMap,
    buffers: &TensorMap,
    training: bool,
) -> Result<crate::goctconv::MultiScaleFeature> {
    let mut g = Graph::new();
    let vars = params.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
    let xv = MsVar::constant(&mut g, x);
    let mut ctx = Ctx {
        g: &mut g,
        vars: &vars,
        buffers,
        training,
        bn_outputs: Vec::new(),
        batch_stats: Vec::new(),
    };
    let y = ilblock_graph(&mut ctx, prefix, &xv, spec)?;
    Ok(y.to_value(&g))
}

/// High branch followed by the upsampled low branch, at the high resolution.
fn stage_tap(g: &mut Graph, x: &MsVar) -> Result<Var> {
    let mut parts = Vec::new();
    if let Some(h) = x.get(1) {
        parts.push(h);
    }
    if let Some(l) = x.get(2) {
        parts.push(g.upsample_nearest(l, 2)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_channels(&parts)
    }
}

fn network_forward(ctx: &mut Ctx, arch: &Architecture, image: Var) -> Result<(Var, Vec<(String, Var)>)> {
    let (_, c, h, w) = ctx.g.dims4(image)?;
    if c != 3 {
        return Err(config_err!("expected a 3-channel image, got {c} channels"));
    }
    if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 || h == 0 || w == 0 {
        return Err(config_err!(
            "input {h}x{w} is not divisible by the total stride {TOTAL_STRIDE}"
        ));
    }
    let stem_w = ctx.var("stem.conv")?;
    let p = ConvParams {
        stride: 2,
        padding: 1,
        dilation: 1,
        groups: 1,
    };
    let x = ctx.g.conv2d(image, stem_w, None, p)?;
    let x = ctx.bn_act("stem.bn", "stem.act", x)?;
    let mut reference = (h / 2, w / 2);
    let mut feat = MsVar::new(ctx.g, reference, vec![(1, x)])?;
    let mut taps = Vec::new();
    let blocks = arch.blocks();
    for (s, stage) in arch.stages.iter().enumerate() {
        if s > 0 {
            reference = (reference.0 / 2, reference.1 / 2);
            let mut pooled = Vec::with_capacity(feat.entries.len());
            for &(sc, v) in &feat.entries {
                pooled.push((sc, ctx.g.avg_pool2(v)?));
            }
            feat = MsVar::new(ctx.g, reference, pooled)?;
        }
        for b in 0..stage.len() {
            let spec = blocks
                .iter()
                .find(|(k, _)| *k == (s, b))
                .expect("block listed")
                .1;
            feat = ilblock_graph(ctx, &block_prefix(s, b), &feat, &spec)?;
        }
        if s > 0 {
            let t = stage_tap(ctx.g, &feat)?;
            taps.push((format!("stage{}.out", s + 1), t));
        }
    }
    let logits = match &arch.head {
        HeadArch::Linear => {
            let (_, t) = taps.last().expect("stage 4 tap");
            let w = ctx.var("head.w")?;
            let b = ctx.var("head.b")?;
            let y = ctx.g.conv2d(*t, w, Some(b), ConvParams::default())?;
            ctx.g.upsample_nearest(y, 16)?
        }
        HeadArch::Csf { dilations, .. } => csf_graph(ctx, arch, &taps, dilations, (h / 4, w / 4))?,
    };
    Ok((logits, taps))
}

/// Fusion head over the taps of stages 2, 3 and 4.
pub fn csf_graph(
    ctx: &mut Ctx,
    arch: &Architecture,
    taps: &[(String, Var)],
    dilations: &[usize],
    reference: (usize, usize),
) -> Result<Var> {
    if taps.len() != 3 {
        return Err(config_err!("fusion needs three stage taps, got {}", taps.len()));
    }
    let x = MsVar::new(
        ctx.g,
        reference,
        taps.iter().zip(CSF_SCALES).map(|((_, v), s)| (s, *v)).collect(),
    )?;
    let y = ctx.goct("csf.in", &x, &arch.csf_in_spec().expect("csf"))?;
    let y = ctx.ms_bn_act("csf.in_bn", "csf.in_act", &y)?;
    let mut branches: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    for &d in dilations {
        let z = ctx.goct(&format!("csf.dil{d}"), &y, &arch.csf_dil_spec(d).expect("csf"))?;
        for (s, v) in z.entries {
            branches.entry(s).or_default().push(v);
        }
    }
    let mut summed = Vec::new();
    for (s, vs) in branches {
        summed.push((s, ctx.g.add_n(&vs)?));
    }
    let y = MsVar::new(ctx.g, reference, summed)?;
    let y = ctx.ms_bn_act("csf.dil_bn", "csf.dil_act", &y)?;
    let y = ctx.goct("csf.out", &y, &arch.csf_out_spec().expect("csf"))?;
    let y = ctx.ms_bn_act("csf.out_bn", "csf.out_act", &y)?;
    let top = y.get(1).expect("fusion output at the highest tap resolution");
    let w = ctx.var("csf.final.w")?;
    let b = ctx.var("csf.final.b")?;
    let z = ctx.g.conv2d(top, w, Some(b), ConvParams::default())?;
    ctx.g.upsample_nearest(z, 4)
}
