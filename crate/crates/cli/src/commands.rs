use std::path::Path;
use std::time::Instant;

use csnet_core::complexity::{count_flops, split_points, sweep, sweep_table, width_points, SweepRow};
use csnet_core::data::{load_folder, resize_bilinear, synth_dataset, SaliencySample};
use csnet_core::metrics::{evaluate, FAggregation};
use csnet_core::model::{Architecture, CSNet, TOTAL_STRIDE};
use csnet_core::prune::{finetune_setup, prune_and_finetune, prune as prune_model, Selection};
use csnet_core::train::{train_with_hook, EpochLog, TrainReport};
use csnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub enum Axis {
    Split,
    Width,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io(e: std::io::Error) -> CliError {
    CliError::Runtime(e.into())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(path, text + "\n").map_err(io)
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(io)
}

fn write_manifest(cfg: &RunConfig, command: &str, extra: Value) -> Result<(), CliError> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "seeds": cfg.seeds(),
        "outputs": extra,
    });
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

fn load_data(cfg: &RunConfig) -> Result<Vec<SaliencySample>, CliError> {
    let d = &cfg.data;
    match (&d.images, &d.masks, d.synth) {
        (Some(i), Some(m), _) => {
            let folder = load_folder(i, m)?;
            for s in &folder.skipped {
                eprintln!("warning: {s} has no image/mask partner; skipped");
            }
            Ok(folder.samples)
        }
        (Some(_), None, _) | (None, Some(_), _) => Err(usage("--images and --masks must be given together")),
        (None, None, Some(n)) => {
            if n == 0 || d.size < 32 {
                return Err(usage("--synth needs N >= 1 and --size >= 32"));
            }
            Ok(synth_dataset(n, d.size, cfg.seeds().data)?)
        }
        (None, None, None) => Err(usage("no dataset: pass --images and --masks, or --synth N")),
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<CSNet, CliError> {
    let p = path.ok_or_else(|| usage("--checkpoint is required"))?;
    Ok(CSNet::load(p)?)
}

fn print_epoch(e: &EpochLog) {
    println!(
        "epoch {:>4}  loss {:.6}  mae {:.4}  lr {:.1e}  gamma<1e-6 {:.3}  channel std {:.4}",
        e.epoch, e.loss, e.mae, e.lr, e.gamma_below_fraction, e.mean_channel_std
    );
}

fn write_training(cfg: &RunConfig, report: &TrainReport, log_name: &str, hist_dir: &str) -> Result<(), CliError> {
    report.write_csv(cfg.out.join(log_name))?;
    let dir = cfg.out.join(hist_dir);
    std::fs::create_dir_all(&dir).map_err(io)?;
    report.write_histograms(&dir)?;
    if let Some(last) = report.loss_trace.last() {
        println!("final loss: {last:.17e}");
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    if data.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let mut model = CSNet::new(&cfg.model, cfg.seeds().model)?;
    let policy = cfg.policy(model.dynamic_targets());
    prepare_out(cfg)?;
    let report = train_with_hook(&mut model, &data, &cfg.train_config(), &policy, &mut print_epoch)?;
    model.save(cfg.out.join("model.ckpt"))?;
    write_training(cfg, &report, "train_log.csv", "gamma_hist")?;
    write_manifest(
        cfg,
        "train",
        json!({"checkpoint": "model.ckpt", "log": "train_log.csv", "histograms": "gamma_hist", "samples": data.len()}),
    )
}

pub fn prune(cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = cfg.checkpoint.as_deref();
    let selection = match cfg.prune.fraction {
        Some(f) if !(0.0..1.0).contains(&f) => return Err(usage(format!("--fraction must be in [0, 1), got {f}"))),
        Some(f) => Selection::Fraction(f),
        None if !(cfg.prune.tau > 0.0 && cfg.prune.tau.is_finite()) => {
            return Err(usage(format!("--tau must be positive, got {}", cfg.prune.tau)))
        }
        None => Selection::Threshold(cfg.prune.tau),
    };
    let model = load_checkpoint(checkpoint)?;
    let input = (cfg.input_size, cfg.input_size);
    prepare_out(cfg)?;
    let (compact, report) = if cfg.train.finetune_epochs > 0 && cfg.data.is_set() {
        let data = load_data(cfg)?;
        let policy = cfg.policy(model.dynamic_targets());
        let out = prune_and_finetune(&model, &data, &cfg.train_config(), &policy, cfg.prune.criterion, selection, input)?;
        out.finetune.write_csv(cfg.out.join("finetune_log.csv"))?;
        (out.model, out.report)
    } else {
        if cfg.train.finetune_epochs > 0 {
            eprintln!("warning: no dataset given; skipping fine-tuning");
        }
        prune_model(&model, cfg.prune.criterion, selection, input)?
    };
    for f in &report.flagged {
        eprintln!("warning: every channel of {f} fell below the threshold; its strongest channel was kept");
    }
    compact.save(cfg.out.join("pruned.ckpt"))?;
    write_json(&cfg.out.join("prune_report.json"), &report)?;
    report.write_histogram_csv(cfg.out.join("channels.csv"))?;
    println!(
        "params {} -> {} ({:.1}% pruned), FLOPs at {}x{} {} -> {} ({:.1}% pruned)",
        report.params_before,
        report.params_after,
        100.0 * report.param_pruning_rate,
        input.0,
        input.1,
        report.flops_before,
        report.flops_after,
        100.0 * report.flop_pruning_rate
    );
    write_manifest(
        cfg,
        "prune",
        json!({"source": checkpoint, "checkpoint": "pruned.ckpt", "report": "prune_report.json", "channels": "channels.csv"}),
    )
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = cfg.checkpoint.as_deref();
    let mut model = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    if data.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let (ft_cfg, ft_policy) = finetune_setup(&cfg.train_config(), &cfg.policy(model.dynamic_targets()));
    prepare_out(cfg)?;
    let report = train_with_hook(&mut model, &data, &ft_cfg, &ft_policy, &mut print_epoch)?;
    model.save(cfg.out.join("finetuned.ckpt"))?;
    write_training(cfg, &report, "finetune_log.csv", "gamma_hist_finetune")?;
    write_manifest(cfg, "finetune", json!({"source": checkpoint, "checkpoint": "finetuned.ckpt", "log": "finetune_log.csv"}))
}

fn stride_multiple(v: usize) -> usize {
    (((v as f64) / TOTAL_STRIDE as f64).round() as usize).max(1) * TOTAL_STRIDE
}

/// Saliency probabilities at the sample's own resolution; inputs whose sides
/// are not multiples of the network stride run at the nearest multiple.
fn predict_one(model: &CSNet, s: &SaliencySample, name: &str) -> Result<Tensor, CliError> {
    let (h, w) = (s.height(), s.width());
    let (rh, rw) = (stride_multiple(h), stride_multiple(w));
    let image = if (rh, rw) != (h, w) {
        eprintln!("warning: {name} is {h}x{w}; resized to {rh}x{rw} for inference");
        resize_bilinear(&s.image, rh, rw)
    } else {
        s.image.clone()
    };
    let prob = model.predict(&image.reshape(&[1, 3, rh, rw])?)?.probabilities();
    let prob = resize_bilinear(&prob.reshape(&[1, rh, rw])?, h, w).map(|v| v.clamp(0.0, 1.0));
    Ok(prob)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let checkpoint = cfg.checkpoint.as_deref();
    let model = load_checkpoint(checkpoint)?;
    let d = &cfg.data;
    let (samples, names) = match (&d.images, &d.masks) {
        (Some(i), Some(m)) => {
            let f = load_folder(i, m)?;
            for s in &f.skipped {
                eprintln!("warning: {s} has no image/mask partner; skipped");
            }
            (f.samples, f.names)
        }
        _ => {
            let s = load_data(cfg)?;
            let names = (0..s.len()).map(|i| format!("synth{i}")).collect();
            (s, names)
        }
    };
    if samples.is_empty() {
        return Err(CliError::Runtime(csnet_core::Error::Config("dataset is empty".into())));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (s, n) in samples.iter().zip(&names) {
        preds.push(predict_one(&model, s, n)?);
        masks.push(s.mask.clone());
    }
    let m = evaluate(&preds, &masks, FAggregation::default())?;
    for &i in &m.excluded {
        eprintln!("warning: {} has no foreground; left out of F", names[i]);
    }
    println!("F_beta_max {:.6}  MAE {:.6}  ({} images)", m.f_beta_max, m.mae, m.images);
    prepare_out(cfg)?;
    let excluded: Vec<&String> = m.excluded.iter().map(|&i| &names[i]).collect();
    write_json(
        &cfg.out.join("metrics.json"),
        &json!({
            "f_beta_max": m.f_beta_max,
            "mae": m.mae,
            "images": m.images,
            "excluded": excluded,
            "aggregation": FAggregation::default(),
            "curve": m.curve,
        }),
    )?;
    write_manifest(cfg, "eval", json!({"source": checkpoint, "metrics": "metrics.json"}))
}

pub fn analyze(cfg: &RunConfig, axis: Option<Axis>, write: bool) -> Result<(), CliError> {
    let input = (cfg.input_size, cfg.input_size);
    if cfg.input_size % TOTAL_STRIDE != 0 {
        return Err(usage(format!("--input-size must be a multiple of {TOTAL_STRIDE}")));
    }
    let rows: Vec<SweepRow> = match axis {
        Some(Axis::Split) => sweep(&cfg.model, &split_points(), input, cfg.flop_convention)?,
        Some(Axis::Width) => sweep(&cfg.model, &width_points(), input, cfg.flop_convention)?,
        None => {
            let arch = Architecture::from_config(&cfg.model)?;
            vec![SweepRow {
                label: "config".into(),
                config: cfg.model.clone(),
                report: count_flops(&arch, input, cfg.flop_convention)?,
                pruned_params: None,
                pruned_flops: None,
            }]
        }
    };
    let table = sweep_table(&rows);
    print!("{table}");
    if write {
        prepare_out(cfg)?;
        std::fs::write(cfg.out.join("complexity.txt"), &table).map_err(io)?;
        write_json(&cfg.out.join("complexity.json"), &rows)?;
        write_manifest(cfg, "analyze", json!({"table": "complexity.txt", "report": "complexity.json"}))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    min_ms: f64,
    median_ms: f64,
    mean_ms: f64,
    input: [usize; 4],
    threads: usize,
    samples_ms: Vec<f64>,
}

pub fn bench(cfg: &RunConfig, repeats: usize, write: bool) -> Result<(), CliError> {
    let checkpoint = cfg.checkpoint.as_deref();
    if repeats < 3 {
        return Err(usage(format!("--repeats must be >= 3, got {repeats}")));
    }
    let s = cfg.input_size;
    if s % TOTAL_STRIDE != 0 {
        return Err(usage(format!("--input-size must be a multiple of {TOTAL_STRIDE}")));
    }
    let model = match checkpoint {
        Some(p) => CSNet::load(p)?,
        None => CSNet::new(&cfg.model, cfg.seeds().model)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().data);
    let x = Tensor::from_fn(&[1, 3, s, s], |_| rng.gen_range(0.0..1.0));
    for _ in 0..2 {
        model.predict(&x)?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.predict(&x)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let report = BenchReport {
        min_ms: sorted[0],
        median_ms: median,
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        input: [1, 3, s, s],
        threads: 1,
        samples_ms: samples,
    };
    println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.into()))?);
    if write {
        prepare_out(cfg)?;
        write_json(&cfg.out.join("bench.json"), &report)?;
        write_manifest(cfg, "bench", json!({"source": checkpoint, "report": "bench.json"}))?;
    }
    Ok(())
}
