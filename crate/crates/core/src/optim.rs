//! Adam with standard and feature-conditioned (dynamic) weight decay.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSign {
    /// Batch mean of `|GAP|`.
    #[default]
    Absolute,
    /// Batch mean of the raw GAP; negative values turn decay into growth.
    Signed,
}

/// Per-channel metric of a `[N, C, H, W]` feature map: the batch mean of
/// each map's global average, absolute by default.
pub fn channel_metric(features: &Tensor) -> Result<Vec<f64>> {
    channel_metric_with(features, MetricSign::Absolute)
}

pub fn channel_metric_with(features: &Tensor, sign: MetricSign) -> Result<Vec<f64>> {
    let (n, c, h, w) = features.dims4()?;
    let plane = h * w;
    if n == 0 || plane == 0 {
        return Err(config_err!("channel metric of an empty feature map"));
    }
    let mut s = vec![0.0; c];
    for (i, map) in features.data().chunks_exact(plane).enumerate() {
        let gap = map.iter().sum::<f64>() / plane as f64;
        s[i % c] += match sign {
            MetricSign::Absolute => gap.abs(),
            MetricSign::Signed => gap,
        };
    }
    for v in &mut s {
        *v /= n as f64;
    }
    Ok(s)
}

fn check_len(w: &[f64], grad: &[f64]) -> Result<()> {
    if w.len() != grad.len() {
        return Err(config_err!(
            "weight and gradient lengths differ ({} vs {})",
            w.len(),
            grad.len()
        ));
    }
    Ok(())
}

/// `w <- w - lr*grad - lr*lambda*w`.
pub fn standard_decay_step(w: &mut [f64], grad: &[f64], lr: f64, lambda: f64) -> Result<()> {
    check_len(w, grad)?;
    for (wi, gi) in w.iter_mut().zip(grad) {
        *wi = *wi - lr * gi - lr * lambda * *wi;
    }
    Ok(())
}

/// `w <- w - lr*grad - lr*lambda*S*w`, where channel `c` owns the `c`-th
/// contiguous block of `w.len() / s.len()` values.
pub fn dynamic_decay_step(w: &mut [f64], grad: &[f64], lr: f64, lambda: f64, s: &[f64]) -> Result<()> {
    check_len(w, grad)?;
    let per = channel_block(w.len(), s.len())?;
    for (i, (wi, gi)) in w.iter_mut().zip(grad).enumerate() {
        *wi = *wi - lr * gi - lr * lambda * s[i / per] * *wi;
    }
    Ok(())
}

fn channel_block(len: usize, channels: usize) -> Result<usize> {
    if channels == 0 || len % channels != 0 {
        return Err(config_err!(
            "metric has {channels} entries for a tensor of {len} values"
        ));
    }
    Ok(len / channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Advances the moments and returns the bias-corrected direction
    /// `m_hat / (sqrt(v_hat) + eps)`.
    pub fn direction(&mut self, grad: &[f64], cfg: &AdamConfig) -> Result<Vec<f64>> {
        check_len(&self.m, grad)?;
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + cfg.eps)
            })
            .collect())
    }
}

/// One Adam update of `w` without decay.
pub fn adam_step(state: &mut AdamState, w: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
    check_len(w, grad)?;
    let d = state.direction(grad, cfg)?;
    for (wi, di) in w.iter_mut().zip(&d) {
        *wi -= lr * di;
    }
    Ok(())
}

/// How decay coefficients relate to the learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayCoupling {
    /// `w <- w - lr*adam - lambda*w`: the decay is not scaled by lr.
    Literal,
    /// `w <- w - lr*adam - lr*lambda*w`.
    #[default]
    LrScaled,
}

impl DecayCoupling {
    pub fn factor(self, lr: f64) -> f64 {
        match self {
            DecayCoupling::Literal => 1.0,
            DecayCoupling::LrScaled => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayPolicy {
    pub lambda_std: f64,
    pub lambda_dyn: f64,
    /// Parameters under dynamic decay; everything else gets standard decay.
    pub dynamic_targets: BTreeSet<String>,
    pub sign: MetricSign,
    pub standard_coupling: DecayCoupling,
    pub dynamic_coupling: DecayCoupling,
    /// Upper bound on a per-step decay coefficient; `None` leaves it free.
    pub max_decay: Option<f64>,
}

impl Default for DecayPolicy {
    fn default() -> Self {
        DecayPolicy {
            lambda_std: 5e-3,
            lambda_dyn: 3.0,
            dynamic_targets: BTreeSet::new(),
            sign: MetricSign::Absolute,
            standard_coupling: DecayCoupling::LrScaled,
            dynamic_coupling: DecayCoupling::LrScaled,
            max_decay: Some(1.0),
        }
    }
}

impl DecayPolicy {
    /// Standard decay only.
    pub fn standard(lambda_std: f64) -> Self {
        DecayPolicy {
            lambda_std,
            lambda_dyn: 0.0,
            ..Self::default()
        }
    }

    pub fn dynamic(lambda_std: f64, lambda_dyn: f64, targets: impl IntoIterator<Item = String>) -> Self {
        DecayPolicy {
            lambda_std,
            lambda_dyn,
            dynamic_targets: targets.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Targets must be BatchNorm scales (`*.gamma`) among `params`.
    pub fn validate(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, v) in [("lambda_std", self.lambda_std), ("lambda_dyn", self.lambda_dyn)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let Some(m) = self.max_decay {
            if !(m.is_finite() && m > 0.0) {
                return Err(config_err!("max_decay must be positive, got {m}"));
            }
        }
        for t in &self.dynamic_targets {
            if !t.ends_with(".gamma") {
                return Err(config_err!("dynamic target {t} is not a BatchNorm scale"));
            }
            if !params.contains_key(t) {
                return Err(config_err!("dynamic target {t} is not a model parameter"));
            }
        }
        Ok(())
    }

    pub fn is_dynamic(&self, name: &str) -> bool {
        self.lambda_dyn > 0.0 && self.dynamic_targets.contains(name)
    }

    fn clamp(&self, coef: f64) -> f64 {
        match self.max_decay {
            Some(m) => coef.min(m),
            None => coef,
        }
    }

    /// Per-step coefficient of the standard decay at learning rate `lr`.
    pub fn standard_coefficient(&self, lr: f64) -> f64 {
        self.clamp(self.standard_coupling.factor(lr) * self.lambda_std)
    }

    /// Per-channel coefficients of the dynamic decay for metric `s`.
    pub fn dynamic_coefficients(&self, lr: f64, s: &[f64]) -> Vec<f64> {
        let f = self.dynamic_coupling.factor(lr) * self.lambda_dyn;
        s.iter().map(|&v| self.clamp(f * v)).collect()
    }
}

/// Adam state for a set of named parameters, plus the decay applied after
/// each adaptive step.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    pub adam: AdamConfig,
    pub policy: DecayPolicy,
    states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(adam: AdamConfig, policy: DecayPolicy) -> Self {
        Optimizer {
            adam,
            policy,
            states: BTreeMap::new(),
        }
    }

    /// Updates one parameter: `w <- w - lr*adam(grad) - c*w`, where `c` is the
    /// standard coefficient, or per channel the dynamic one when `metric` is
    /// given for a dynamic target.
    pub fn update(&mut self, name: &str, w: &mut [f64], grad: &[f64], lr: f64, metric: Option<&[f64]>) -> Result<()> {
        check_len(w, grad)?;
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(w.len()));
        if state.m.len() != w.len() {
            return Err(config_err!("parameter {name} changed size"));
        }
        let d = state.direction(grad, &self.adam)?;
        match metric.filter(|_| self.policy.is_dynamic(name)) {
            Some(s) => {
                let per = channel_block(w.len(), s.len())?;
                let coef = self.policy.dynamic_coefficients(lr, s);
                for (i, (wi, di)) in w.iter_mut().zip(&d).enumerate() {
                    *wi = *wi - lr * di - coef[i / per] * *wi;
                }
            }
            None => {
                let c = self.policy.standard_coefficient(lr);
                for (wi, di) in w.iter_mut().zip(&d) {
                    *wi = *wi - lr * di - c * *wi;
                }
            }
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}
