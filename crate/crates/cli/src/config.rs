//! Resolved run configuration: a JSON file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use csnet_core::complexity::FlopConvention;
use csnet_core::model::{CSNetConfig, HeadKind};
use csnet_core::optim::{DecayCoupling, DecayPolicy};
use csnet_core::prune::Criterion;
use csnet_core::train::TrainConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    /// Number of synthetic samples, used when no folders are given.
    pub synth: Option<usize>,
    pub size: usize,
}

impl DataSpec {
    pub fn is_set(&self) -> bool {
        self.images.is_some() || self.synth.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySpec {
    pub lambda_std: f64,
    pub lambda_dyn: f64,
    /// Whether the dynamic decay coefficient is multiplied by the learning rate.
    pub dynamic_coupling: DecayCoupling,
}

impl Default for DecaySpec {
    fn default() -> Self {
        let d = DecayPolicy::default();
        DecaySpec {
            lambda_std: d.lambda_std,
            lambda_dyn: d.lambda_dyn,
            dynamic_coupling: d.dynamic_coupling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSpec {
    pub criterion: Criterion,
    pub tau: f64,
    /// Remove this fraction of each layer instead of thresholding.
    pub fraction: Option<f64>,
}

impl Default for PruneSpec {
    fn default() -> Self {
        PruneSpec {
            criterion: Criterion::BnGamma,
            tau: 1e-6,
            fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint read by prune, finetune, eval and bench.
    pub checkpoint: Option<PathBuf>,
    pub model: CSNetConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub decay: DecaySpec,
    pub prune: PruneSpec,
    pub input_size: usize,
    pub flop_convention: FlopConvention,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            checkpoint: None,
            model: CSNetConfig::default(),
            data: DataSpec {
                size: 64,
                ..DataSpec::default()
            },
            train: TrainConfig::default(),
            decay: DecaySpec::default(),
            prune: PruneSpec::default(),
            input_size: 224,
            flop_convention: FlopConvention::Macs,
            out: PathBuf::from("runs/latest"),
        }
    }
}

/// Independent seeds for each consumer of randomness, drawn in a fixed order
/// from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
}

impl RunConfig {
    /// Reads a run configuration, or the `config` section of a manifest
    /// written by an earlier run.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("config {}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        if value.get("command").is_some() {
            value = value.get_mut("config").map(serde_json::Value::take).unwrap_or_default();
        }
        serde_json::from_value(value).map_err(|e| bad(&e))
    }

    pub fn seeds(&self) -> Seeds {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        Seeds {
            model: r.next_u64(),
            data: r.next_u64(),
            train: r.next_u64(),
        }
    }

    /// The decay policy with every non-stem BatchNorm scale of `targets` under
    /// dynamic decay when `lambda_dyn > 0`.
    pub fn policy(&self, targets: Vec<String>) -> DecayPolicy {
        if self.decay.lambda_dyn > 0.0 {
            DecayPolicy {
                dynamic_coupling: self.decay.dynamic_coupling,
                ..DecayPolicy::dynamic(self.decay.lambda_std, self.decay.lambda_dyn, targets)
            }
        } else {
            DecayPolicy::standard(self.decay.lambda_std)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Usage(format!("train: {e}")))?;
        for (name, v) in [("decay.lambda_std", self.decay.lambda_std), ("decay.lambda_dyn", self.decay.lambda_dyn)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Usage(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.input_size == 0 {
            return Err(CliError::Usage("input_size must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_split(s: &str) -> Result<[usize; 2], String> {
    let (h, l) = s.split_once('/').ok_or_else(|| format!("expected H/L, got {s}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad high share in {s}"))?;
    let l = l.trim().parse().map_err(|_| format!("bad low share in {s}"))?;
    Ok([h, l])
}

pub fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s {
        "csf" => Ok(HeadKind::Csf),
        "linear" => Ok(HeadKind::Linear),
        _ => Err(format!("unknown head {s}; expected csf or linear")),
    }
}

pub fn parse_convention(s: &str) -> Result<FlopConvention, String> {
    match s {
        "macs" => Ok(FlopConvention::Macs),
        "twice-macs" => Ok(FlopConvention::TwiceMacs),
        _ => Err(format!("unknown FLOP convention {s}; expected macs or twice-macs")),
    }
}

pub fn parse_coupling(s: &str) -> Result<DecayCoupling, String> {
    match s {
        "lr-scaled" => Ok(DecayCoupling::LrScaled),
        "literal" => Ok(DecayCoupling::Literal),
        _ => Err(format!("unknown coupling {s}; expected lr-scaled or literal")),
    }
}
