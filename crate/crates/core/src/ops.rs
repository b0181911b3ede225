//! Value-level entry points for the primitive operations. Each call builds
//! a throwaway [`Graph`]; use the graph methods directly when gradients are
//! needed.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{BatchStats, Graph};
use crate::kernels::ConvParams;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`, running statistics `0 / 1`.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(config_err!("batch norm parameter lengths differ"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("batch norm eps must be > 0"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(config_err!("batch norm momentum must lie in (0, 1]"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(config_err!("negative running variance"));
        }
        Ok(())
    }

    /// Exponential update of the running statistics; the stored variance is
    /// the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        update_running(
            &mut self.running_mean,
            &mut self.running_var,
            stats,
            self.momentum,
        );
    }
}

pub fn update_running(mean: &mut [f64], var: &mut [f64], stats: &BatchStats, momentum: f64) {
    let m = stats.count as f64;
    let unbias = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
    for c in 0..mean.len() {
        mean[c] = (1.0 - momentum) * mean[c] + momentum * stats.mean[c];
        var[c] = (1.0 - momentum) * var[c] + momentum * stats.var[c] * unbias;
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: ConvParams,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let y = g.conv2d(x, w, b, params)?;
    Ok(g.value(y).clone())
}

pub fn batch_norm(x: &Tensor, params: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    params.validate()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::new(vec![params.channels()], params.gamma.clone())?);
    let beta = g.constant(Tensor::new(vec![params.channels()], params.beta.clone())?);
    let y = if training {
        let (y, stats) = g.batch_norm_train(xv, gamma, beta, params.eps)?;
        params.update_running(&stats);
        y
    } else {
        g.batch_norm_eval(
            xv,
            gamma,
            beta,
            &params.running_mean,
            &params.running_var,
            params.eps,
        )?
    };
    Ok(g.value(y).clone())
}

pub fn prelu(x: &Tensor, slope: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = g.constant(Tensor::new(vec![slope.len()], slope.to_vec())?);
    let y = g.prelu(xv, a)?;
    Ok(g.value(y).clone())
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.avg_pool2(xv)?;
    Ok(g.value(y).clone())
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.upsample_nearest(xv, factor)?;
    Ok(g.value(y).clone())
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.global_avg_pool(xv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = BatchNormParams::new(1);
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        p.update_running(&stats);
        assert!((p.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((p.running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = BatchNormParams::new(2);
        p.eps = 0.0;
        assert!(p.validate().is_err());
        let mut p = BatchNormParams::new(2);
        p.running_var[1] = -1.0;
        assert!(p.validate().is_err());
    }
}
