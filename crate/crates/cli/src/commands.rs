use std::fs;
use std::path::{Path, PathBuf};

use swan_core::baseline::{run_comparison, summarize, write_comparison_csv, ComparisonSetup};
use swan_core::config::{DataSource, DataSplits, RunConfig, DEFAULT_SEED, MNIST_FILES};
use swan_core::deploy::{
    compact_flops_report, flops_report, load_checkpoint, prune_to_compact, recalibrate_bn, save_checkpoint, to_json,
    Checkpoint,
};
use swan_core::model::{build, ForwardMode, GatedModel, Layer};
use swan_core::train::{evaluate, train as run_training, MetricsLog};

use crate::{Common, Failure, Mode};

type Outcome = Result<(), Failure>;

pub const DATA_ENV: &str = "SWAN_DATA_DIR";

struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn setup(c: &Common, command: &str) -> Result<Run, Failure> {
    let text = fs::read_to_string(&c.config)
        .map_err(|e| Failure::new(2, format!("cannot read --config {}: {e}", c.config.display())))?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| Failure::new(2, format!("{}: {e}", c.config.display())))?;
    let seed = match (c.seed, cfg.seed) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => {
            eprintln!("note: no seed given; using the default seed {DEFAULT_SEED}");
            DEFAULT_SEED
        }
    };
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    fs::create_dir_all(&out).map_err(|e| Failure::new(2, format!("cannot create --out {}: {e}", out.display())))?;
    fs::write(out.join("config.toml"), &text).map_err(|e| Failure::new(1, e.to_string()))?;
    if c.seed.is_some() {
        fs::write(out.join("seed.txt"), format!("{seed}\n")).map_err(|e| Failure::new(1, e.to_string()))?;
    }
    Ok(Run { cfg, seed, out })
}

/// `--data-dir`, then `data.dir`, then SWAN_DATA_DIR.
fn data_dir(c: &Common, cfg: &RunConfig) -> Option<PathBuf> {
    c.data_dir
        .clone()
        .or_else(|| cfg.data.dir.clone())
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

fn load_data(c: &Common, run: &Run) -> Result<DataSplits, Failure> {
    let dir = data_dir(c, &run.cfg);
    if run.cfg.data.source == DataSource::Mnist {
        let Some(d) = &dir else {
            return Err(Failure::new(
                2,
                format!("missing dataset path: pass --data-dir, set data.dir in the config, or export {DATA_ENV}"),
            ));
        };
        if let Some(f) = MNIST_FILES.iter().find(|f| !d.join(f).is_file()) {
            return Err(Failure::new(
                2,
                format!("dataset file {} not found; check --data-dir (or run `swan fetch`)", d.join(f).display()),
            ));
        }
    }
    Ok(DataSplits::load(&run.cfg.data, dir.as_deref(), run.seed)?)
}

fn checkpoint_path(run: &Run, given: Option<PathBuf>, default: &str) -> PathBuf {
    given.unwrap_or_else(|| run.out.join(default))
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| Failure::new(4, format!("checkpoint {}: {e}", path.display())))
}

fn save(ckpt: &Checkpoint, path: &Path) -> Outcome {
    Ok(save_checkpoint(ckpt, path)?)
}

fn first_tau(model: &GatedModel<f32>) -> Option<f64> {
    model.gate_banks().next().map(|(_, b)| b.tau)
}

fn forward_mode(m: Mode) -> ForwardMode {
    match m {
        Mode::Dense => ForwardMode::Dense,
        Mode::Soft => ForwardMode::Soft,
        Mode::Hard => ForwardMode::Hard,
    }
}

pub fn train(c: &Common) -> Outcome {
    let run = setup(c, "train")?;
    let data = load_data(c, &run)?;
    let cfg = run.cfg.train_config();
    let cfg = swan_core::train::TrainConfig { seed: run.seed, ..cfg };
    let mut model = build::<f32>(&run.cfg.model, &run.cfg.gates, run.seed)?;
    let mut log = MetricsLog::create(run.out.join("metrics.csv"))?;
    let mut best = f64::NEG_INFINITY;
    let ramped = run.cfg.sparsity.fully_ramped().min(cfg.epochs as f64);
    let base = Checkpoint {
        sparsity: Some(run.cfg.sparsity.clone()),
        normalization: data.train.normalization.clone(),
        ..Checkpoint::new(model.clone(), run.seed, 0)
    };
    println!(
        "training {} on {} samples ({} val) for {} epochs",
        model.meta.architecture,
        data.train.len(),
        data.val.len(),
        cfg.epochs
    );
    let mut hook = |m: &GatedModel<f32>, e: &swan_core::train::EpochMetrics| -> swan_core::Result<()> {
        log.append(e)?;
        println!(
            "epoch {:>3}  loss {:.4}  task {:.4}  train acc {:.4}  val acc hard {:.4} soft {:.4}  active {:.4}  flops {:.4}",
            e.epoch,
            e.train_loss,
            e.train_task_loss,
            e.train_acc,
            e.val_acc_hard,
            e.val_acc_soft,
            e.active_fraction_hard,
            e.expected_flops_fraction
        );
        let ckpt = Checkpoint {
            model: m.clone(),
            epoch: e.epoch,
            ..base.clone()
        };
        save_checkpoint(&ckpt, &run.out.join("last.ckpt"))?;
        // Before the ramps finish, a high score only reflects the dense start.
        if e.epoch as f64 >= ramped && e.val_acc_hard > best {
            best = e.val_acc_hard;
            save_checkpoint(&ckpt, &run.out.join("best.ckpt"))?;
        }
        Ok(())
    };
    let outcome = run_training(&mut model, &data.train, &data.val, &cfg, &run.cfg.sparsity, &mut hook);
    if let Err(e) = outcome {
        if matches!(e, swan_core::Error::Divergence { .. }) {
            eprintln!("last good checkpoint kept at {}", run.out.join("last.ckpt").display());
        }
        return Err(e.into());
    }
    fs::rename(run.out.join("last.ckpt"), run.out.join("final.ckpt")).map_err(|e| Failure::new(1, e.to_string()))?;
    let hard = evaluate(&model, &data.test, ForwardMode::Hard)?;
    let soft = evaluate(&model, &data.test, ForwardMode::Soft)?;
    println!(
        "test acc hard {:.4} soft {:.4}  active fraction {:.4}  flops fraction {:.4}",
        hard.accuracy, soft.accuracy, hard.active_fraction, hard.flops_fraction
    );
    println!("wrote {}", run.out.display());
    Ok(())
}

pub fn eval(c: &Common, checkpoint: Option<PathBuf>, mode: Mode) -> Outcome {
    let run = setup(c, "eval")?;
    let ckpt = load(&checkpoint_path(&run, checkpoint, "final.ckpt"))?;
    let data = load_data(c, &run)?;
    let report = evaluate(&ckpt.model, &data.test, forward_mode(mode))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    fs::write(run.out.join(format!("eval-{}.json", mode_name(mode))), json + "\n")
        .map_err(|e| Failure::new(1, e.to_string()))?;
    Ok(())
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Dense => "dense",
        Mode::Soft => "soft",
        Mode::Hard => "hard",
    }
}

fn has_bn(model: &GatedModel<f32>) -> bool {
    model.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
}

pub fn calibrate(c: &Common, checkpoint: Option<PathBuf>) -> Outcome {
    let run = setup(c, "calibrate")?;
    let mut ckpt = load(&checkpoint_path(&run, checkpoint, "final.ckpt"))?;
    let data = load_data(c, &run)?;
    let before = evaluate(&ckpt.model, &data.test, ForwardMode::Hard)?;
    let layers = recalibrate_bn(&mut ckpt.model, &data.calibration, run.cfg.prune.calibration_batch, ForwardMode::Hard)?;
    let after = evaluate(&ckpt.model, &data.test, ForwardMode::Hard)?;
    println!(
        "recalibrated {} BN layer(s) on {} samples; hard test acc {:.4} -> {:.4}",
        layers.len(),
        data.calibration.len(),
        before.accuracy,
        after.accuracy
    );
    save(&ckpt, &run.out.join("calibrated.ckpt"))
}

pub fn prune(c: &Common, checkpoint: Option<PathBuf>, tau: Option<f64>) -> Outcome {
    let run = setup(c, "prune")?;
    let mut ckpt = load(&checkpoint_path(&run, checkpoint, "final.ckpt"))?;
    let data = load_data(c, &run)?;
    let tau = tau
        .or(run.cfg.prune.tau)
        .or_else(|| first_tau(&ckpt.model))
        .unwrap_or(run.cfg.sparsity.tau);
    if has_bn(&ckpt.model) {
        let n = recalibrate_bn(&mut ckpt.model, &data.calibration, run.cfg.prune.calibration_batch, ForwardMode::Hard)?;
        println!("recalibrated {} BN layer(s)", n.len());
    }
    let before = flops_report(&ckpt.model);
    let hard = evaluate(&ckpt.model, &data.test, ForwardMode::Hard)?;
    let compact = prune_to_compact(&ckpt.model, tau, Some(&data.calibration), run.cfg.prune.keep_quantile)?;
    for l in &compact.degenerate_layers {
        eprintln!("warning: layer {l} had no open unit at tau {tau}; kept its best unit");
    }
    let after = compact_flops_report(&compact);
    let acc = evaluate(&compact.model, &data.test, ForwardMode::Hard)?;
    println!("before: params {} flops fraction {:.4}", before.params, before.flops_fraction);
    println!(
        "after:  params {} ({:.4})  flops fraction {:.4}  gated-layer params {:.4}",
        after.params, after.params_fraction, after.flops_fraction, after.gated_params_fraction
    );
    println!("test acc: gated hard {:.4}  compact {:.4}", hard.accuracy, acc.accuracy);
    fs::write(run.out.join("flops.csv"), after.to_csv()).map_err(|e| Failure::new(1, e.to_string()))?;
    let out = Checkpoint {
        sparsity: ckpt.sparsity.clone(),
        normalization: ckpt.normalization.clone(),
        ..Checkpoint::from_compact(compact, ckpt.seed, ckpt.epoch)
    };
    save(&out, &run.out.join("compact.ckpt"))
}

pub fn export(c: &Common, checkpoint: Option<PathBuf>) -> Outcome {
    let run = setup(c, "export")?;
    let path = checkpoint_path(&run, checkpoint, "compact.ckpt");
    let ckpt = load(&path)?;
    let json = serde_json::to_string(&to_json(&ckpt)).expect("export serializes");
    let target = run.out.join("model.json");
    fs::write(&target, json).map_err(|e| Failure::new(1, e.to_string()))?;
    println!("exported {} to {}", path.display(), target.display());
    Ok(())
}

pub fn compare(c: &Common) -> Outcome {
    let run = setup(c, "compare")?;
    let data = load_data(c, &run)?;
    let mut compare = run.cfg.compare.clone().unwrap_or_default();
    if let Some(s) = c.seed {
        compare.seeds = vec![s];
    }
    let setup = ComparisonSetup {
        arch: run.cfg.model.clone(),
        gates: run.cfg.gates.clone(),
        train: run.cfg.train_config(),
        sparsity: run.cfg.sparsity.clone(),
        compare,
    };
    let csv_path = run.out.join("comparison.csv");
    let mut done = Vec::new();
    let mut on_point = |p: &swan_core::baseline::ComparisonPoint| {
        println!("{:<9} budget {:<5} seed {:<3} top1 {:.4} flops {:.4} {}", p.method, p.budget, p.seed, p.top1, p.flops_fraction, p.status);
        done.push(p.clone());
        if let Ok(f) = fs::File::create(&csv_path) {
            if let Err(e) = write_comparison_csv(&done, f) {
                eprintln!("warning: could not update {}: {e}", csv_path.display());
            }
        }
    };
    let points = run_comparison(&data, &setup, &mut on_point)?;
    write_comparison_csv(&points, fs::File::create(&csv_path).map_err(|e| Failure::new(1, e.to_string()))?)?;
    println!("\n{:<9} {:>7} {:>8} {:>8} {:>5}", "method", "budget", "top1", "flops", "runs");
    for (m, b, acc, fl, n) in summarize(&points) {
        println!("{:<9} {:>7.3} {:>8.4} {:>8.4} {:>5}", m.as_str(), b, acc, fl, n);
    }
    if points.iter().all(|p| !p.ok()) {
        return Err(Failure::new(5, "every comparison cell failed"));
    }
    Ok(())
}
