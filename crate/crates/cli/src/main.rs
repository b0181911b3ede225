mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_convention, parse_coupling, parse_head, parse_split, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "csnet", version, about = "Train, prune, evaluate and profile CSNet saliency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch and write a checkpoint plus logs.
    Train(Common),
    /// Prune a trained checkpoint and fine-tune the compact model.
    Prune(Common),
    /// Continue training a checkpoint with standard decay only.
    Finetune(Common),
    /// Max F-measure and MAE of a checkpoint on a dataset.
    Eval(Common),
    /// Parameter and FLOP counts, optionally over a sweep.
    Analyze(Common),
    /// Single-thread inference latency.
    Bench(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepAxis {
    Split,
    Width,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to read (prune, finetune, eval, bench).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading folders.
    #[arg(long)]
    synth: Option<usize>,
    /// Side length of synthetic samples.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    lambda_std: Option<f64>,
    #[arg(long)]
    lambda_dyn: Option<f64>,
    /// lr-scaled (default) or literal: whether the dynamic decay is multiplied by lr.
    #[arg(long, value_parser = parse_coupling)]
    dynamic_coupling: Option<csnet_core::optim::DecayCoupling>,
    /// bn_gamma, l1_norm or geometric_median.
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    /// Remove this fraction of every layer instead of thresholding at tau.
    #[arg(long)]
    fraction: Option<f64>,
    /// High/low channel ratio, e.g. 3/1.
    #[arg(long, value_parser = parse_split)]
    split: Option<[usize; 2]>,
    #[arg(long)]
    width_mult: Option<f64>,
    /// csf or linear (the bare extractor).
    #[arg(long, value_parser = parse_head)]
    head: Option<csnet_core::model::HeadKind>,
    #[arg(long)]
    input_size: Option<usize>,
    /// macs (default) or twice-macs.
    #[arg(long, value_parser = parse_convention)]
    flop_convention: Option<csnet_core::complexity::FlopConvention>,
    #[arg(long, value_enum)]
    sweep: Option<SweepAxis>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.checkpoint {
            c.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.images {
            c.data.images = Some(v.clone());
        }
        if let Some(v) = &self.masks {
            c.data.masks = Some(v.clone());
        }
        if let Some(v) = self.synth {
            c.data.synth = Some(v);
        }
        if let Some(v) = self.size {
            c.data.size = v;
        }
        if let Some(v) = self.epochs {
            c.train = csnet_core::train::TrainConfig {
                seed: c.train.seed,
                batch_size: c.train.batch_size,
                lr: c.train.lr,
                augment: c.train.augment,
                adam: c.train.adam,
                ..csnet_core::train::TrainConfig::scaled(v)
            };
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.finetune_epochs {
            c.train.finetune_epochs = v;
        }
        if let Some(v) = self.lambda_std {
            c.decay.lambda_std = v;
        }
        if let Some(v) = self.lambda_dyn {
            c.decay.lambda_dyn = v;
        }
        if let Some(v) = self.dynamic_coupling {
            c.decay.dynamic_coupling = v;
        }
        if let Some(v) = &self.criterion {
            c.prune.criterion = v.parse().map_err(|e| CliError::Usage(format!("--criterion: {e}")))?;
        }
        if let Some(v) = self.tau {
            c.prune.tau = v;
        }
        if let Some(v) = self.fraction {
            c.prune.fraction = Some(v);
        }
        if let Some(v) = self.split {
            c.model.split = v;
        }
        if let Some(v) = self.width_mult {
            c.model.width_multiplier = v;
        }
        if let Some(v) = self.head {
            c.model.head = v;
        }
        if let Some(v) = self.input_size {
            c.input_size = v;
        }
        if let Some(v) = self.flop_convention {
            c.flop_convention = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Prune(a) => commands::prune(&a.resolve()?),
        Command::Finetune(a) => commands::finetune(&a.resolve()?),
        Command::Eval(a) => commands::eval(&a.resolve()?),
        Command::Analyze(a) => {
            let axis = a.sweep.map(|s| match s {
                SweepAxis::Split => commands::Axis::Split,
                SweepAxis::Width => commands::Axis::Width,
            });
            commands::analyze(&a.resolve()?, axis, a.out.is_some())
        }
        Command::Bench(a) => commands::bench(&a.resolve()?, a.repeats, a.out.is_some()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
