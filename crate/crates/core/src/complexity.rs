//! Exact parameter and operation counts for specs and whole networks.
//!
//! Convolutions are counted in multiply-accumulates. BatchNorm, PReLU,
//! pooling and upsampling cost one op per output element; they enter the
//! totals but are kept in their own column. The counts mirror the forward
//! pass step for step, including the reuse of pooled inputs across paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::goctconv::{GOctConvSpec, GroupsMode};
use crate::model::{Architecture, CSNetConfig, HeadArch, SlotKind, TOTAL_STRIDE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// Report multiply-accumulates as FLOPs.
    #[default]
    Macs,
    /// Count a multiply-accumulate as two FLOPs.
    TwiceMacs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub elementwise: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.macs += o.macs;
        self.elementwise += o.elementwise;
    }
}

impl Cost {
    pub fn flops(&self, convention: FlopConvention) -> u64 {
        match convention {
            FlopConvention::Macs => self.macs + self.elementwise,
            FlopConvention::TwiceMacs => 2 * self.macs + self.elementwise,
        }
    }
}

/// Parameters of a plain convolution.
pub fn conv_params(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool) -> usize {
    kernel * kernel * (cin / groups) * cout + if bias { cout } else { 0 }
}

/// MACs of a convolution producing `cout x h x w` outputs.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, groups: usize, out_hw: (usize, usize)) -> u64 {
    (cout * out_hw.0 * out_hw.1 * kernel * kernel * (cin / groups)) as u64
}

/// Cost of one gOctConv at reference resolution `hw`, batch 1.
pub fn goctconv_cost(spec: &GOctConvSpec, hw: (usize, usize)) -> Cost {
    let at = |f: usize| (hw.0 / f, hw.1 / f);
    let mut cost = Cost::default();
    // one pooled chain per input scale, as long as its deepest consumer needs
    let mut chain_depth: BTreeMap<usize, usize> = BTreeMap::new();
    for (r, s) in spec.paths() {
        let groups = match spec.groups_mode {
            GroupsMode::Full => 1,
            GroupsMode::Depthwise => r.channels,
        };
        let conv_at = r.scale_factor.max(s.scale_factor);
        cost.macs += conv_macs(r.channels, s.channels, spec.kernel, groups, at(conv_at));
        if r.scale_factor > s.scale_factor {
            let (h, w) = at(s.scale_factor);
            cost.elementwise += (s.channels * h * w) as u64;
        }
        if r.scale_factor < s.scale_factor {
            let steps = (s.scale_factor / r.scale_factor).trailing_zeros() as usize;
            let d = chain_depth.entry(r.scale_factor).or_default();
            *d = (*d).max(steps);
        }
    }
    for (r, depth) in chain_depth {
        let c = spec.in_channels(r);
        for i in 1..=depth {
            let (h, w) = at(r << i);
            cost.elementwise += (c * h * w) as u64;
        }
    }
    cost
}

/// BatchNorm plus PReLU over `c x h x w`.
fn bn_act_cost(c: usize, hw: (usize, usize)) -> Cost {
    Cost {
        macs: 0,
        elementwise: 2 * (c * hw.0 * hw.1) as u64,
    }
}

fn ms_bn_act_cost(scales: &[crate::goctconv::ScaleSpec], hw: (usize, usize)) -> Cost {
    let mut c = Cost::default();
    for s in scales {
        c += bn_act_cost(s.channels, (hw.0 / s.scale_factor, hw.1 / s.scale_factor));
    }
    c
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input: [usize; 2],
    pub convention: FlopConvention,
    pub modules: Vec<ModuleCost>,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
    pub flops: u64,
}

/// Trainable parameters of an architecture; running statistics excluded.
pub fn count_params(arch: &Architecture) -> u64 {
    arch.layout()
        .iter()
        .filter(|s| s.kind == SlotKind::Param)
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum()
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Per-module operation counts for a batch-1 forward pass at `input`.
pub fn count_flops(arch: &Architecture, input: (usize, usize), convention: FlopConvention) -> Result<ComplexityReport> {
    let (h, w) = input;
    if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
        return Err(config_err!(
            "input {h}x{w} is not divisible by the total stride {TOTAL_STRIDE}"
        ));
    }
    arch.validate()?;
    let mut costs: Vec<(String, Cost)> = Vec::new();

    let half = (h / 2, w / 2);
    let mut stem = Cost {
        macs: conv_macs(3, arch.stem, 3, 1, half),
        elementwise: 0,
    };
    stem += bn_act_cost(arch.stem, half);
    costs.push(("stem".into(), stem));

    let blocks = arch.blocks();
    let mut hw = half;
    let mut prev = (arch.stem, 0);
    for (s, stage) in arch.stages.iter().enumerate() {
        let mut c = Cost::default();
        if s > 0 {
            hw = (hw.0 / 2, hw.1 / 2);
            c.elementwise += (prev.0 * hw.0 * hw.1 + prev.1 * (hw.0 / 2) * (hw.1 / 2)) as u64;
        }
        for b in 0..stage.len() {
            let spec = blocks.iter().find(|(k, _)| *k == (s, b)).expect("listed").1;
            let oct = spec.oct_spec();
            c += goctconv_cost(&oct, hw);
            c += ms_bn_act_cost(&oct.out_scales, hw);
            let dw = spec.dw_spec();
            for _ in 0..2 {
                c += goctconv_cost(&dw, hw);
                c += ms_bn_act_cost(&dw.out_scales, hw);
            }
            prev = spec.split;
        }
        if s > 0 {
            // low branch upsampled into the stage tap
            c.elementwise += (prev.1 * hw.0 * hw.1) as u64;
        }
        costs.push((format!("stage{}", s + 1), c));
    }

    let mut head = Cost::default();
    match &arch.head {
        HeadArch::Linear => {
            let c4 = arch.tap_channels(3);
            head.macs += conv_macs(c4, 1, 1, 1, (h / 16, w / 16));
            head.elementwise += (h * w) as u64;
            costs.push(("head".into(), head));
        }
        HeadArch::Csf { out, dilations, .. } => {
            let r = (h / 4, w / 4);
            let in_spec = arch.csf_in_spec().expect("csf");
            head += goctconv_cost(&in_spec, r);
            head += ms_bn_act_cost(&in_spec.out_scales, r);
            for &d in dilations {
                head += goctconv_cost(&arch.csf_dil_spec(d).expect("csf"), r);
            }
            head += ms_bn_act_cost(&in_spec.out_scales, r);
            let out_spec = arch.csf_out_spec().expect("csf");
            head += goctconv_cost(&out_spec, r);
            head += ms_bn_act_cost(&out_spec.out_scales, r);
            head.macs += conv_macs(*out, 1, 1, 1, r);
            head.elementwise += (h * w) as u64;
            costs.push(("csf".into(), head));
        }
    }

    let mut params: BTreeMap<String, u64> = BTreeMap::new();
    for slot in arch.layout().iter().filter(|s| s.kind == SlotKind::Param) {
        *params.entry(module_of(&slot.name).to_string()).or_default() +=
            slot.shape.iter().product::<usize>() as u64;
    }
    let modules: Vec<ModuleCost> = costs
        .into_iter()
        .map(|(name, c)| ModuleCost {
            params: params.get(&name).copied().unwrap_or(0),
            name,
            macs: c.macs,
            elementwise: c.elementwise,
        })
        .collect();
    let total = modules.iter().fold(Cost::default(), |mut a, m| {
        a += Cost {
            macs: m.macs,
            elementwise: m.elementwise,
        };
        a
    });
    Ok(ComplexityReport {
        input: [h, w],
        convention,
        params: modules.iter().map(|m| m.params).sum(),
        macs: total.macs,
        elementwise: total.elementwise,
        flops: total.flops(convention),
        modules,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "value")]
pub enum SweepPoint {
    Split([usize; 2]),
    Width(f64),
}

impl SweepPoint {
    pub fn label(&self) -> String {
        match self {
            SweepPoint::Split([a, b]) => format!("{a}/{b}"),
            SweepPoint::Width(k) => format!("x{k:.2}"),
        }
    }

    pub fn apply(&self, template: &CSNetConfig) -> CSNetConfig {
        let mut c = template.clone();
        match self {
            SweepPoint::Split(s) => c.split = *s,
            SweepPoint::Width(k) => c.width_multiplier = *k,
        }
        c
    }
}

/// High/low ratios from all-high to all-low.
pub fn split_points() -> Vec<SweepPoint> {
    [[1, 0], [3, 1], [5, 5], [1, 3], [0, 1]]
        .into_iter()
        .map(SweepPoint::Split)
        .collect()
}

pub fn width_points() -> Vec<SweepPoint> {
    [1.0, 1.25, 1.5, 1.75, 2.0].into_iter().map(SweepPoint::Width).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub config: CSNetConfig,
    pub report: ComplexityReport,
    /// Counts of a pruned counterpart, when one is supplied.
    pub pruned_params: Option<u64>,
    pub pruned_flops: Option<u64>,
}

impl SweepRow {
    pub fn attach_pruned(&mut self, compact: &Architecture) -> Result<()> {
        let r = count_flops(compact, (self.report.input[0], self.report.input[1]), self.report.convention)?;
        self.pruned_params = Some(r.params);
        self.pruned_flops = Some(r.flops);
        Ok(())
    }
}

pub fn sweep(
    template: &CSNetConfig,
    points: &[SweepPoint],
    input: (usize, usize),
    convention: FlopConvention,
) -> Result<Vec<SweepRow>> {
    points
        .iter()
        .map(|p| {
            let config = p.apply(template);
            let arch = Architecture::from_config(&config)?;
            Ok(SweepRow {
                label: p.label(),
                report: count_flops(&arch, input, convention)?,
                config,
                pruned_params: None,
                pruned_flops: None,
            })
        })
        .collect()
}

fn human(v: u64, unit: f64, suffix: &str, digits: usize) -> String {
    format!("{:.*}{suffix}", digits, v as f64 / unit)
}

/// Aligned text table with one row per entry: method, split, params, FLOPs.
pub fn render_table(rows: &[(String, String, u64, u64, Option<(u64, u64)>)]) -> String {
    let pruned = rows.iter().any(|r| r.4.is_some());
    let mut header = vec!["Method".to_string(), "Split".into(), "PARM.".into(), "FLOPs".into()];
    if pruned {
        header.push("PARM. (pruned)".into());
        header.push("FLOPs (pruned)".into());
    }
    let mut cells: Vec<Vec<String>> = vec![header];
    for (method, split, p, f, pr) in rows {
        let mut row = vec![
            method.clone(),
            split.clone(),
            human(*p, 1e3, "K", 0),
            human(*f, 1e9, "G", 3),
        ];
        if pruned {
            let (pp, pf) = pr.map_or(("-".into(), "-".into()), |(a, b)| (human(a, 1e3, "K", 0), human(b, 1e9, "G", 3)));
            row.push(pp);
            row.push(pf);
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub fn method_name(config: &CSNetConfig) -> String {
    let base = match config.head {
        crate::model::HeadKind::Csf => "CSNet",
        crate::model::HeadKind::Linear => "Extractor",
    };
    if (config.width_multiplier - 1.0).abs() < 1e-12 {
        base.to_string()
    } else {
        format!("{base}-x{}", config.width_multiplier)
    }
}

pub fn split_label(config: &CSNetConfig) -> String {
    format!("{}/{}", config.split[0], config.split[1])
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let flat: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                method_name(&r.config),
                split_label(&r.config),
                r.report.params,
                r.report.flops,
                r.pruned_params.zip(r.pruned_flops),
            )
        })
        .collect();
    render_table(&flat)
}
