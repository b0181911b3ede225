//! The training loop, per-epoch logs and holdout evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, make_batch, SaliencySample};
use crate::error::{config_err, Error, Result};
use crate::graph::{sigmoid, Graph};
use crate::metrics::{evaluate, DatasetMetrics, FAggregation};
use crate::model::CSNet;
use crate::optim::{channel_metric_with, AdamConfig, DecayPolicy, Optimizer};
use crate::tensor::Tensor;

pub const NEAR_ZERO: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub seed: u64,
    pub finetune_epochs: usize,
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 24,
            epochs: 300,
            lr: 1e-4,
            lr_drop_epochs: vec![200, 250],
            seed: 0,
            finetune_epochs: 20,
            augment: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full schedule scaled down to `epochs`, with drops at the same
    /// relative positions. Drops that collide on very short schedules merge.
    pub fn scaled(epochs: usize) -> Self {
        let d = Self::default();
        let mut drops: Vec<usize> = d
            .lr_drop_epochs
            .iter()
            .map(|&e| e * epochs / d.epochs)
            .filter(|&e| e > 0 && e < epochs)
            .collect();
        drops.dedup();
        TrainConfig {
            epochs,
            lr_drop_epochs: drops,
            finetune_epochs: (d.finetune_epochs * epochs / d.epochs).max(1),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("lr_drop_epochs must be strictly increasing"));
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(config_err!("lr drops must come before the last epoch"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mae: f64,
    pub lr: f64,
    #[serde(rename = "gamma_below_1e-6_fraction")]
    pub gamma_below_fraction: f64,
    pub mean_channel_std: f64,
}

/// Histogram of `log10 |gamma|` over the dynamic-decay candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaHistogram {
    pub epoch: usize,
    /// Lower bin edges in log10 units; the last bin is open above.
    pub log10_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Exact zeros, which have no logarithm.
    pub zeros: usize,
}

impl GammaHistogram {
    pub const LOW: i32 = -40;
    pub const HIGH: i32 = 2;

    pub fn new(epoch: usize, values: &[f64]) -> Self {
        let edges: Vec<f64> = (Self::LOW..Self::HIGH).map(f64::from).collect();
        let mut counts = vec![0; edges.len()];
        let mut zeros = 0;
        for &v in values {
            if v == 0.0 {
                zeros += 1;
                continue;
            }
            let bin = (v.abs().log10().floor() as i64 - Self::LOW as i64).clamp(0, edges.len() as i64 - 1);
            counts[bin as usize] += 1;
        }
        GammaHistogram {
            epoch,
            log10_edges: edges,
            counts,
            zeros,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub histograms: Vec<GammaHistogram>,
    /// Loss of every optimisation step in order.
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,loss,MAE,lr,gamma_below_1e-6_fraction,mean_channel_std")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                e.epoch, e.loss, e.mae, e.lr, e.gamma_below_fraction, e.mean_channel_std
            )?;
        }
        Ok(())
    }

    /// One `gamma_hist_epoch{N}.json` per epoch inside `dir`.
    pub fn write_histograms(&self, dir: impl AsRef<Path>) -> Result<()> {
        for h in &self.histograms {
            let path = dir.as_ref().join(format!("gamma_hist_epoch{}.json", h.epoch));
            std::fs::write(path, serde_json::to_string_pretty(h)?)?;
        }
        Ok(())
    }
}

/// All values of the model's dynamic-decay candidates (every BatchNorm
/// scale except the stem's), in layer order.
pub fn candidate_gammas(model: &CSNet) -> Vec<f64> {
    model
        .dynamic_targets()
        .iter()
        .filter_map(|n| model.params.get(n))
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

pub fn near_zero_fraction(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.abs() < NEAR_ZERO).count() as f64 / values.len() as f64
}

/// Mean over channels of each channel's standard deviation across
/// `(N, H, W)`.
fn channel_stds(x: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, map) in x.data().chunks_exact(plane).enumerate() {
        for &v in map {
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
    }
    Ok(sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / count;
            (q / count - m * m).max(0.0).sqrt()
        })
        .collect())
}

/// Progress callback invoked after every epoch.
pub type EpochHook<'a> = dyn FnMut(&EpochLog) + 'a;

/// Trains `model` in place.
pub fn train(
    model: &mut CSNet,
    data: &[SaliencySample],
    cfg: &TrainConfig,
    policy: &DecayPolicy,
) -> Result<TrainReport> {
    train_with_hook(model, data, cfg, policy, &mut |_| {})
}

pub fn train_with_hook(
    model: &mut CSNet,
    data: &[SaliencySample],
    cfg: &TrainConfig,
    policy: &DecayPolicy,
    hook: &mut EpochHook,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    cfg.validate()?;
    policy.validate(&model.params)?;
    let candidates: BTreeSet<String> = model.dynamic_targets().into_iter().collect();
    let mut opt = Optimizer::new(cfg.adam, policy.clone());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mae_sum, mut std_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<SaliencySample>;
            let refs: Vec<&SaliencySample> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| {
                        let s = cfg.seed ^ ((epoch as u64) << 32) ^ ((i as u64) << 1) ^ 0x5bd1_e995;
                        augment(&data[i], s)
                    })
                    .collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &data[i]).collect()
            };
            let (images, masks) = make_batch(&refs)?;
            let step = train_step(model, &mut opt, &images, &masks, lr, &candidates).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("training diverged at epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            report.loss_trace.push(step.loss);
            loss_sum += step.loss;
            mae_sum += step.mae;
            std_sum += step.mean_channel_std;
            batches += 1;
        }
        let gammas = candidate_gammas(model);
        let log = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            mae: mae_sum / batches as f64,
            lr,
            gamma_below_fraction: near_zero_fraction(&gammas),
            mean_channel_std: std_sum / batches as f64,
        };
        report.histograms.push(GammaHistogram::new(epoch, &gammas));
        hook(&log);
        report.epochs.push(log);
    }
    Ok(report)
}

struct StepOutcome {
    loss: f64,
    mae: f64,
    mean_channel_std: f64,
}

fn train_step(
    model: &mut CSNet,
    opt: &mut Optimizer,
    images: &Tensor,
    masks: &Tensor,
    lr: f64,
    candidates: &BTreeSet<String>,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let x = g.constant(images.clone());
    let pass = model.forward(&mut g, &vars, x, true)?;
    let loss = g.bce_with_logits(pass.logits, masks)?;
    let loss_value = g.value(loss).data()[0];
    g.backward(loss)?;

    let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut stds = Vec::new();
    for (bn, y) in &pass.bn_outputs {
        let gamma = format!("{bn}.gamma");
        if opt.policy.is_dynamic(&gamma) {
            metrics.insert(gamma.clone(), channel_metric_with(g.value(*y), opt.policy.sign)?);
        }
        if candidates.contains(&gamma) {
            stds.extend(channel_stds(g.value(*y))?);
        }
    }
    let logits = g.value(pass.logits);
    let mae = logits
        .data()
        .iter()
        .zip(masks.data())
        .map(|(&z, &m)| (sigmoid(z) - m).abs())
        .sum::<f64>()
        / logits.numel() as f64;

    for (name, var) in &vars {
        let w = model
            .params
            .get_mut(name)
            .ok_or_else(|| config_err!("missing parameter {name}"))?;
        let grad = match g.grad(*var) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; w.numel()],
        };
        opt.update(name, w.data_mut(), &grad, lr, metrics.get(name).map(Vec::as_slice))?;
        w.ensure_finite(name)?;
    }
    model.update_running_stats(&pass.batch_stats)?;
    Ok(StepOutcome {
        loss: loss_value,
        mae,
        mean_channel_std: if stds.is_empty() { 0.0 } else { stds.iter().sum::<f64>() / stds.len() as f64 },
    })
}

/// Inference-mode predictions for every sample, in order.
pub fn predict_all(model: &CSNet, data: &[SaliencySample], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&SaliencySample> = chunk.iter().collect();
        let (images, _) = make_batch(&refs)?;
        let probs = model.predict(&images)?.probabilities();
        let (n, c, h, w) = probs.dims4()?;
        for part in probs.data().chunks_exact(c * h * w).take(n) {
            out.push(Tensor::new(vec![c, h, w], part.to_vec())?);
        }
    }
    Ok(out)
}

/// Max-F and MAE of the model on `data`.
pub fn evaluate_model(model: &CSNet, data: &[SaliencySample]) -> Result<DatasetMetrics> {
    let preds = predict_all(model, data, 16)?;
    let masks: Vec<Tensor> = data.iter().map(|s| s.mask.clone()).collect();
    evaluate(&preds, &masks, FAggregation::MeanPrecisionRecall)
}
