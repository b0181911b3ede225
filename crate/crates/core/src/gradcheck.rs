//! Central-difference verification of analytic gradients.

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Gradient check of a scalar-valued computation of one input.
pub fn grad_check<F>(op: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| op(g, vars[0]), std::slice::from_ref(input), step, None)?;
    Ok(report.max_rel_error)
}

/// Gradient check over several inputs. With `max_coords = Some(k)` at most
/// `k` evenly spaced coordinates of every input are perturbed.
pub fn grad_check_many<F>(
    op: F,
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(config_err!("finite-difference step {step} outside [1e-7, 1e-3]"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for a in &analytic {
        if !a.all_finite() {
            return Err(Error::Numeric("non-finite analytic gradient".into()));
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match max_coords {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[idx] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Numeric("non-finite gradient comparison".into()));
            }
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, idx);
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(config_err!("grad_check needs a scalar output, got {:?}", t.shape()));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    Ok(s)
}
