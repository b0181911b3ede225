//! Generalized octave convolution over an arbitrary set of spatial scales.
//!
//! A feature is split into branches at power-of-two divisors of a shared
//! reference resolution. Every `(input scale, output scale)` pair owns its
//! own kernel block. Paths that move to a coarser scale average-pool before
//! convolving; paths that move to a finer scale convolve and then apply
//! nearest-neighbour upsampling. Each output branch is the sum of its
//! incoming paths. There is no bias: a BatchNorm always follows.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    /// Spatial divisor relative to the reference resolution.
    pub scale_factor: usize,
    /// Zero means the branch is absent.
    pub channels: usize,
}

impl ScaleSpec {
    pub fn new(scale_factor: usize, channels: usize) -> Self {
        ScaleSpec {
            scale_factor,
            channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupsMode {
    Full,
    Depthwise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GOctConvSpec {
    pub in_scales: Vec<ScaleSpec>,
    pub out_scales: Vec<ScaleSpec>,
    pub kernel: usize,
    pub dilation: usize,
    pub groups_mode: GroupsMode,
    pub cross_scale: bool,
}

/// Canonical parameter name of the kernel block for path `r -> s`.
pub fn weight_name(from_scale: usize, to_scale: usize) -> String {
    format!("w[{from_scale}->{to_scale}]")
}

fn check_scale_list(list: &[ScaleSpec], what: &str) -> Result<()> {
    for (i, s) in list.iter().enumerate() {
        if s.scale_factor == 0 || !s.scale_factor.is_power_of_two() {
            return Err(config_err!(
                "{what} scale factor {} is not a power of two",
                s.scale_factor
            ));
        }
        if i > 0 && list[i - 1].scale_factor >= s.scale_factor {
            return Err(config_err!("{what} scale factors must be strictly increasing"));
        }
    }
    Ok(())
}

impl GOctConvSpec {
    /// Full-group, cross-scale spec.
    pub fn full(in_scales: Vec<ScaleSpec>, out_scales: Vec<ScaleSpec>, kernel: usize) -> Self {
        GOctConvSpec {
            in_scales,
            out_scales,
            kernel,
            dilation: 1,
            groups_mode: GroupsMode::Full,
            cross_scale: true,
        }
    }

    /// Per-scale depthwise spec without cross-scale paths.
    pub fn depthwise(scales: Vec<ScaleSpec>, kernel: usize, dilation: usize) -> Self {
        GOctConvSpec {
            in_scales: scales.clone(),
            out_scales: scales,
            kernel,
            dilation,
            groups_mode: GroupsMode::Depthwise,
            cross_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale_list(&self.in_scales, "input")?;
        check_scale_list(&self.out_scales, "output")?;
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(config_err!("kernel must be odd, got {}", self.kernel));
        }
        if self.dilation == 0 {
            return Err(config_err!("dilation must be >= 1"));
        }
        if !self.in_scales.iter().any(|s| s.channels > 0) {
            return Err(config_err!("gOctConv needs at least one non-empty input scale"));
        }
        if !self.out_scales.iter().any(|s| s.channels > 0) {
            return Err(config_err!("gOctConv needs at least one non-empty output scale"));
        }
        if !self.cross_scale {
            let a: Vec<usize> = self.in_scales.iter().map(|s| s.scale_factor).collect();
            let b: Vec<usize> = self.out_scales.iter().map(|s| s.scale_factor).collect();
            if a != b {
                return Err(config_err!(
                    "without cross-scale paths input and output scales must coincide ({a:?} vs {b:?})"
                ));
            }
        }
        if self.groups_mode == GroupsMode::Depthwise {
            for (r, s) in self.paths() {
                if r.channels != s.channels {
                    return Err(config_err!(
                        "depthwise path {}->{} needs equal channels, got {} vs {}",
                        r.scale_factor,
                        s.scale_factor,
                        r.channels,
                        s.channels
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every `(input, output)` pair that carries a kernel.
    pub fn paths(&self) -> Vec<(ScaleSpec, ScaleSpec)> {
        let mut out = Vec::new();
        for s in self.out_scales.iter().filter(|s| s.channels > 0) {
            for r in self.in_scales.iter().filter(|r| r.channels > 0) {
                if self.cross_scale || r.scale_factor == s.scale_factor {
                    out.push((*r, *s));
                }
            }
        }
        out
    }

    /// `[C_out, C_in / groups, k, k]` for the `r -> s` block.
    pub fn weight_shape(&self, r: &ScaleSpec, s: &ScaleSpec) -> [usize; 4] {
        let per_group = match self.groups_mode {
            GroupsMode::Full => r.channels,
            GroupsMode::Depthwise => 1,
        };
        [s.channels, per_group, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.paths()
            .iter()
            .map(|(r, s)| self.weight_shape(r, s).iter().product::<usize>())
            .sum()
    }

    fn conv_params(&self, channels: usize) -> ConvParams {
        let groups = match self.groups_mode {
            GroupsMode::Full => 1,
            GroupsMode::Depthwise => channels,
        };
        ConvParams::same(self.kernel, self.dilation, groups)
    }

    pub fn in_channels(&self, scale: usize) -> usize {
        channels_at(&self.in_scales, scale)
    }

    pub fn out_channels(&self, scale: usize) -> usize {
        channels_at(&self.out_scales, scale)
    }
}

fn channels_at(list: &[ScaleSpec], scale: usize) -> usize {
    list.iter()
        .find(|s| s.scale_factor == scale)
        .map_or(0, |s| s.channels)
}

/// Ordered branches sharing one reference resolution. Only non-empty
/// branches are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeature {
    reference: (usize, usize),
    entries: Vec<(usize, Tensor)>,
}

fn check_entries<T>(
    reference: (usize, usize),
    entries: &[(usize, T)],
    dims: impl Fn(&T) -> Result<(usize, usize, usize, usize)>,
) -> Result<()> {
    let mut batch = None;
    for (i, (scale, t)) in entries.iter().enumerate() {
        if *scale == 0 || !scale.is_power_of_two() {
            return Err(config_err!("scale factor {scale} is not a power of two"));
        }
        if i > 0 && entries[i - 1].0 >= *scale {
            return Err(config_err!("scale factors must be strictly increasing and unique"));
        }
        let (n, _, h, w) = dims(t)?;
        if reference.0 % scale != 0 || reference.1 % scale != 0 {
            return Err(config_err!(
                "reference {}x{} not divisible by scale {scale}",
                reference.0,
                reference.1
            ));
        }
        if (h, w) != (reference.0 / scale, reference.1 / scale) {
            return Err(config_err!(
                "branch at scale {scale} is {h}x{w}, expected {}x{}",
                reference.0 / scale,
                reference.1 / scale
            ));
        }
        if *batch.get_or_insert(n) != n {
            return Err(config_err!("branches disagree on batch size"));
        }
    }
    Ok(())
}

impl MultiScaleFeature {
    pub fn new(reference: (usize, usize), entries: Vec<(usize, Tensor)>) -> Result<Self> {
        let entries: Vec<(usize, Tensor)> =
            entries.into_iter().filter(|(_, t)| t.shape().get(1) != Some(&0)).collect();
        check_entries(reference, &entries, |t| t.dims4())?;
        Ok(MultiScaleFeature { reference, entries })
    }

    pub fn single(t: Tensor) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        Self::new((h, w), vec![(1, t)])
    }

    pub fn reference(&self) -> (usize, usize) {
        self.reference
    }

    pub fn entries(&self) -> &[(usize, Tensor)] {
        &self.entries
    }

    pub fn get(&self, scale: usize) -> Option<&Tensor> {
        self.entries.iter().find(|(s, _)| *s == scale).map(|(_, t)| t)
    }

    pub fn scales(&self) -> Vec<ScaleSpec> {
        self.entries
            .iter()
            .map(|(s, t)| ScaleSpec::new(*s, t.shape()[1]))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.scales(), other.scales(), "comparing different layouts");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Graph-level counterpart of [`MultiScaleFeature`].
#[derive(Clone, Debug, PartialEq)]
pub struct MsVar {
    pub reference: (usize, usize),
    pub entries: Vec<(usize, Var)>,
}

impl MsVar {
    pub fn new(g: &Graph, reference: (usize, usize), entries: Vec<(usize, Var)>) -> Result<Self> {
        let entries: Vec<(usize, Var)> =
            entries.into_iter().filter(|(_, v)| g.shape(*v).get(1) != Some(&0)).collect();
        check_entries(reference, &entries, |v| g.dims4(*v))?;
        Ok(MsVar { reference, entries })
    }

    pub fn constant(g: &mut Graph, f: &MultiScaleFeature) -> Self {
        MsVar {
            reference: f.reference,
            entries: f.entries.iter().map(|(s, t)| (*s, g.constant(t.clone()))).collect(),
        }
    }

    pub fn get(&self, scale: usize) -> Option<Var> {
        self.entries.iter().find(|(s, _)| *s == scale).map(|(_, v)| *v)
    }

    pub fn scales(&self, g: &Graph) -> Vec<ScaleSpec> {
        self.entries
            .iter()
            .map(|(s, v)| ScaleSpec::new(*s, g.shape(*v)[1]))
            .collect()
    }

    pub fn to_value(&self, g: &Graph) -> MultiScaleFeature {
        MultiScaleFeature {
            reference: self.reference,
            entries: self.entries.iter().map(|(s, v)| (*s, g.value(*v).clone())).collect(),
        }
    }

    /// Apply `f` to every branch.
    pub fn map(
        &self,
        g: &mut Graph,
        mut f: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for &(s, v) in &self.entries {
            entries.push((s, f(g, s, v)?));
        }
        MsVar::new(g, self.reference, entries)
    }
}

/// Kernel blocks of one gOctConv keyed by `(input scale, output scale)`.
pub type GOctWeights = BTreeMap<(usize, usize), Tensor>;

/// He-normal-style initialisation; the fan-in of an output branch counts
/// every path that feeds it.
pub fn init_weights(spec: &GOctConvSpec, rng: &mut impl Rng) -> GOctWeights {
    let mut fan_in: BTreeMap<usize, usize> = BTreeMap::new();
    for (r, s) in spec.paths() {
        let shape = spec.weight_shape(&r, &s);
        *fan_in.entry(s.scale_factor).or_default() += shape[1] * shape[2] * shape[3];
    }
    spec.paths()
        .into_iter()
        .map(|(r, s)| {
            let shape = spec.weight_shape(&r, &s);
            let std = (2.0 / fan_in[&s.scale_factor].max(1) as f64).sqrt();
            let t = Tensor::from_fn(&shape, |_| std * standard_normal(rng));
            ((r.scale_factor, s.scale_factor), t)
        })
        .collect()
}

pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn check_input(g: &Graph, x: &MsVar, spec: &GOctConvSpec) -> Result<()> {
    let expected: Vec<ScaleSpec> = spec.in_scales.iter().filter(|s| s.channels > 0).copied().collect();
    let got = x.scales(g);
    if expected != got {
        return Err(config_err!(
            "input branches {:?} do not match the spec {:?}",
            got,
            expected
        ));
    }
    Ok(())
}

/// Record a gOctConv on the graph.
pub fn goctconv_graph(
    g: &mut Graph,
    x: &MsVar,
    spec: &GOctConvSpec,
    weights: &BTreeMap<(usize, usize), Var>,
) -> Result<MsVar> {
    spec.validate()?;
    check_input(g, x, spec)?;
    // pooled[r] holds input r pooled 0, 1, 2, ... times
    let mut pooled: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    let mut outputs = Vec::new();
    for s in spec.out_scales.iter().filter(|s| s.channels > 0) {
        let mut terms = Vec::new();
        for r in spec.in_scales.iter().filter(|r| r.channels > 0) {
            if !spec.cross_scale && r.scale_factor != s.scale_factor {
                continue;
            }
            let key = (r.scale_factor, s.scale_factor);
            let w = *weights.get(&key).ok_or_else(|| {
                config_err!("missing kernel {}", weight_name(key.0, key.1))
            })?;
            let want = spec.weight_shape(r, s);
            if g.shape(w) != want {
                return Err(config_err!(
                    "kernel {} has shape {:?}, expected {:?}",
                    weight_name(key.0, key.1),
                    g.shape(w),
                    want
                ));
            }
            let xr = x.get(r.scale_factor).expect("checked input");
            let p = spec.conv_params(r.channels);
            let term = if r.scale_factor < s.scale_factor {
                let steps = (s.scale_factor / r.scale_factor).trailing_zeros() as usize;
                let chain = pooled.entry(r.scale_factor).or_insert_with(|| vec![xr]);
                while chain.len() <= steps {
                    let last = *chain.last().expect("non-empty");
                    chain.push(g.avg_pool2(last)?);
                }
                let src = chain[steps];
                g.conv2d(src, w, None, p)?
            } else if r.scale_factor > s.scale_factor {
                let y = g.conv2d(xr, w, None, p)?;
                g.upsample_nearest(y, r.scale_factor / s.scale_factor)?
            } else {
                g.conv2d(xr, w, None, p)?
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(config_err!(
                "output scale {} receives no input path",
                s.scale_factor
            ));
        }
        outputs.push((s.scale_factor, g.add_n(&terms)?));
    }
    MsVar::new(g, x.reference, outputs)
}

fn run_value(
    inputs: &MultiScaleFeature,
    spec: &GOctConvSpec,
    weights: &GOctWeights,
) -> Result<MultiScaleFeature> {
    let mut g = Graph::new();
    let x = MsVar::constant(&mut g, inputs);
    let w: BTreeMap<(usize, usize), Var> =
        weights.iter().map(|(k, t)| (*k, g.constant(t.clone()))).collect();
    let y = goctconv_graph(&mut g, &x, spec, &w)?;
    Ok(y.to_value(&g))
}

pub fn goctconv_forward(
    inputs: &MultiScaleFeature,
    spec: &GOctConvSpec,
    weights: &GOctWeights,
) -> Result<MultiScaleFeature> {
    run_value(inputs, spec, weights)
}

/// The two-scale (factors 1 and 2) cross-scale instance.
pub fn vanilla_spec(in_split: (usize, usize), out_split: (usize, usize), kernel: usize) -> GOctConvSpec {
    GOctConvSpec::full(
        vec![ScaleSpec::new(1, in_split.0), ScaleSpec::new(2, in_split.1)],
        vec![ScaleSpec::new(1, out_split.0), ScaleSpec::new(2, out_split.1)],
        kernel,
    )
}

fn two_scale_split(scales: &[ScaleSpec]) -> Result<(usize, usize)> {
    if scales.len() > 2 || scales.iter().any(|s| s.scale_factor > 2) {
        return Err(config_err!(
            "vanilla OctConv takes exactly the scales 1 and 2, got {:?}",
            scales
        ));
    }
    Ok((channels_at(scales, 1), channels_at(scales, 2)))
}

pub fn vanilla_octconv(
    inputs: &MultiScaleFeature,
    out_split: (usize, usize),
    kernel: usize,
    weights: &GOctWeights,
) -> Result<MultiScaleFeature> {
    let in_split = two_scale_split(&inputs.scales())?;
    run_value(inputs, &vanilla_spec(in_split, out_split, kernel), weights)
}

pub fn vanilla_octconv_graph(
    g: &mut Graph,
    x: &MsVar,
    out_split: (usize, usize),
    kernel: usize,
    weights: &BTreeMap<(usize, usize), Var>,
) -> Result<MsVar> {
    let in_split = two_scale_split(&x.scales(g))?;
    goctconv_graph(g, x, &vanilla_spec(in_split, out_split, kernel), weights)
}

pub fn depthwise_goctconv(
    inputs: &MultiScaleFeature,
    spec: &GOctConvSpec,
    weights: &GOctWeights,
) -> Result<MultiScaleFeature> {
    if spec.groups_mode != GroupsMode::Depthwise || spec.cross_scale {
        return Err(config_err!("depthwise gOctConv needs depthwise groups without cross-scale paths"));
    }
    run_value(inputs, spec, weights)
}
