//! Max F-measure and mean absolute error for saliency maps.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn check_pair(pred: &Tensor, mask: &Tensor) -> Result<()> {
    if pred.numel() != mask.numel() || pred.numel() == 0 {
        return Err(config_err!(
            "prediction {:?} and mask {:?} differ in size",
            pred.shape(),
            mask.shape()
        ));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(config_err!("prediction outside [0, 1]"));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(config_err!("mask is not binary"));
    }
    Ok(())
}

/// Largest `k` with `pred >= k / 255`.
fn bucket(p: f64) -> usize {
    let mut b = ((p * 255.0).floor() as usize).min(255);
    while b < 255 && p >= threshold(b + 1) {
        b += 1;
    }
    while b > 0 && p < threshold(b) {
        b -= 1;
    }
    b
}

/// Precision/recall at each of the 256 thresholds, or `None` when the mask
/// has no foreground and recall is undefined.
pub fn pr_curve(pred: &Tensor, mask: &Tensor) -> Result<Option<Vec<PrPoint>>> {
    check_pair(pred, mask)?;
    let mut pos = [0u64; THRESHOLDS];
    let mut neg = [0u64; THRESHOLDS];
    let mut total_pos = 0u64;
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        let b = bucket(p);
        if m == 1.0 {
            pos[b] += 1;
            total_pos += 1;
        } else {
            neg[b] += 1;
        }
    }
    if total_pos == 0 {
        return Ok(None);
    }
    // predicted positive at threshold k: all buckets >= k
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut curve = vec![PrPoint::default(); THRESHOLDS];
    for k in (0..THRESHOLDS).rev() {
        tp += pos[k];
        fp += neg[k];
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / total_pos as f64;
        curve[k] = PrPoint {
            threshold: threshold(k),
            precision,
            recall,
            f: f_measure(precision, recall),
        };
    }
    Ok(Some(curve))
}

pub fn mae(pred: &Tensor, mask: &Tensor) -> Result<f64> {
    check_pair(pred, mask)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(mask.data())
        .map(|(p, m)| (p - m).abs())
        .sum();
    Ok(s / pred.numel() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f_beta_max: f64,
    pub mae: f64,
    pub curve: Vec<PrPoint>,
}

/// Single-image report. An all-background mask yields a configuration error
/// because recall is undefined.
pub fn max_f_measure(pred: &Tensor, mask: &Tensor) -> Result<MetricsReport> {
    let curve = pr_curve(pred, mask)?.ok_or_else(|| config_err!("mask has no foreground; recall undefined"))?;
    Ok(MetricsReport {
        f_beta_max: curve.iter().map(|p| p.f).fold(0.0, f64::max),
        mae: mae(pred, mask)?,
        curve,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FAggregation {
    /// Average precision and recall over images at each threshold, then F.
    #[default]
    MeanPrecisionRecall,
    /// Average the per-image F at each threshold.
    MeanF,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub f_beta_max: f64,
    pub mae: f64,
    pub curve: Vec<PrPoint>,
    pub images: usize,
    /// Indices of images without foreground, left out of the F aggregation.
    pub excluded: Vec<usize>,
}

pub fn evaluate(preds: &[Tensor], masks: &[Tensor], agg: FAggregation) -> Result<DatasetMetrics> {
    if preds.is_empty() || preds.len() != masks.len() {
        return Err(config_err!(
            "need equally many predictions and masks, got {} and {}",
            preds.len(),
            masks.len()
        ));
    }
    let mut sums = vec![(0.0, 0.0, 0.0); THRESHOLDS];
    let mut used = 0usize;
    let mut excluded = Vec::new();
    let mut mae_sum = 0.0;
    for (i, (p, m)) in preds.iter().zip(masks).enumerate() {
        mae_sum += mae(p, m)?;
        match pr_curve(p, m)? {
            None => excluded.push(i),
            Some(c) => {
                used += 1;
                for (s, pt) in sums.iter_mut().zip(&c) {
                    s.0 += pt.precision;
                    s.1 += pt.recall;
                    s.2 += pt.f;
                }
            }
        }
    }
    let curve: Vec<PrPoint> = if used == 0 {
        Vec::new()
    } else {
        let n = used as f64;
        sums.iter()
            .enumerate()
            .map(|(k, &(ps, rs, fs))| {
                let (precision, recall) = (ps / n, rs / n);
                let f = match agg {
                    FAggregation::MeanPrecisionRecall => f_measure(precision, recall),
                    FAggregation::MeanF => fs / n,
                };
                PrPoint {
                    threshold: threshold(k),
                    precision,
                    recall,
                    f,
                }
            })
            .collect()
    };
    Ok(DatasetMetrics {
        f_beta_max: curve.iter().map(|p| p.f).fold(0.0, f64::max),
        mae: mae_sum / preds.len() as f64,
        curve,
        images: preds.len(),
        excluded,
    })
}
