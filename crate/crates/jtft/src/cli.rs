//! The `jtft` command line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use jtft_core::model::{Jtft, ModelConfig};
use jtft_core::spectral::LrnfOptions;
use jtft_core::tensor::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport};
use jtft_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, ReconOptions, ScaleOptions};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{parse_override_args, ExperimentConfig};
use crate::data::{load_csv_dataset, make_windows, split_dataset, LoadOptions};
use crate::error::{AppError, AppResult};
use crate::report::{to_jsonl, write_jsonl, MetricsRecord, TimingRecord};
use crate::train::{evaluate, naive_baseline, train, Metrics};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Parser)]
#[command(name = "jtft", version, about = "Joint time-frequency Transformer forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a dataset and evaluate on its test split.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory for the checkpoint, metrics and timings.
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        /// Dotted overrides such as `--model.d_m 64`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(short = 'm', long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short = 'T', long)]
        horizon: usize,
        /// Metrics file; defaults to `eval.jsonl` beside the checkpoint.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Reconstruction error of TOPF, RNDF and LRNF frequency sets.
    ReconstructBench {
        #[arg(short, long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        kmax: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        len: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_rows: Option<usize>,
        /// LRNF optimizer steps.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Directory for `recon.jsonl`, `recon.tsv` and timings; stdout otherwise.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Adds a spurious gradient to `psi` (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Forward+backward time as a function of the look-back length.
    ScaleBench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Train { config, out, overrides } => {
            let overrides = parse_override_args(&overrides)?;
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let summary = run_train(&cfg, &out)?;
            println!(
                "test mse {:.6} mae {:.6} ({} windows); naive mse {:.6}; best epoch {:?}",
                summary.test.mse, summary.test.mae, summary.test.windows, summary.baseline.mse, summary.best_epoch
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, horizon, out } => {
            let m = run_eval(&checkpoint, &data, horizon)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("eval.jsonl"));
            write_jsonl(&out, std::slice::from_ref(&m))?;
            print!("{}", to_jsonl(&[m]));
            Ok(())
        }
        Command::ReconstructBench { data, kmax, len, seeds, seed, max_rows, steps, out } => {
            let ds = load_csv_dataset(&data, &LoadOptions { max_rows })?;
            let opts = ReconOptions { k_max: kmax, len, seeds, seed, lrnf: LrnfOptions { steps, ..LrnfOptions::default() } };
            let start = Instant::now();
            let reports = bench::reconstruction_benchmark(&ds.values, &opts)?;
            let elapsed = start.elapsed().as_secs_f64();
            let records = bench::recon_records(&reports, seed);
            let table = bench::recon_table(&reports);
            match out {
                Some(dir) => {
                    create_dir(&dir)?;
                    write_jsonl(&dir.join("recon.jsonl"), &records)?;
                    let tsv = dir.join("recon.tsv");
                    std::fs::write(&tsv, &table).map_err(|e| AppError::io(&tsv, e))?;
                    write_jsonl(&dir.join(TIMINGS_FILE), &[TimingRecord::new("reconstruct", elapsed)])?;
                    print!("{table}");
                }
                None => {
                    print!("{}", to_jsonl(&records));
                    eprint!("{table}");
                }
            }
            Ok(())
        }
        Command::Gradcheck { preset, inject_fault } => {
            let report = run_gradcheck(&preset, inject_fault)?;
            for p in &report.params {
                println!("{:<28} checked {:>4}  max rel err {:.3e}", p.name, p.checked, p.max_rel_err);
            }
            let groups: BTreeSet<&str> = report.params.iter().map(|p| p.name.split('.').next().unwrap_or("")).collect();
            println!("groups: {}", groups.into_iter().collect::<Vec<_>>().join(", "));
            println!("max rel err {:.3e} (tolerance {:.0e})", report.max_rel_err, report.tol);
            if report.passed() {
                return Ok(());
            }
            let worst = report.worst().expect("failed report has entries");
            Err(AppError::Gradcheck(format!(
                "worst coordinate {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}; {} coordinates over tolerance",
                worst.name,
                worst.worst_index,
                worst.analytic,
                worst.numeric,
                worst.max_rel_err,
                report.failures.len()
            )))
        }
        Command::ScaleBench { lengths, repeats, batch, out } => {
            let opts = ScaleOptions { lengths, repeats, batch, ..ScaleOptions::default() };
            let records = bench::scale_benchmark(&opts)?;
            match out {
                Some(path) => {
                    write_jsonl(&path, &records)?;
                    print!("{}", to_jsonl(&records));
                }
                None => print!("{}", to_jsonl(&records)),
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> AppResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub test: Metrics,
    pub baseline: Metrics,
    pub best_epoch: Option<usize>,
    pub records: Vec<MetricsRecord>,
}

/// Trains, evaluates on the test split and writes the checkpoint, the
/// metrics and the timings into `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> AppResult<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.split_spec()?;
    let ds = load_csv_dataset(&cfg.dataset.path, &LoadOptions { max_rows: cfg.dataset.max_rows })?;
    let model_cfg = cfg.model.clone();
    if ds.num_channels() != model_cfg.channels {
        return Err(AppError::Data(format!(
            "{} has {} channels but model.channels = {}",
            ds.name,
            ds.num_channels(),
            model_cfg.channels
        )));
    }
    model_cfg.validate()?;
    let splits = split_dataset(&ds, &spec, model_cfg.lookback)?;
    let (l, t) = (model_cfg.lookback, model_cfg.horizon);
    let test_w = make_windows(&splits.test, l, t, cfg.train.eval_stride)?;
    let mut model = Jtft::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let fingerprint = cfg.fingerprint();
    create_dir(out)?;

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut last = Instant::now();
    let outcome = train(&mut model, &splits, &cfg.train, &mut |e| {
        records.push(MetricsRecord::Epoch {
            dataset: ds.name.clone(),
            horizon: t,
            epoch: e.epoch,
            steps: e.steps,
            train_loss: e.train_loss,
            val_mse: e.val_mse,
            val_mae: e.val_mae,
            fingerprint: fingerprint.clone(),
        });
        timings.push(TimingRecord::new(format!("epoch {}", e.epoch), last.elapsed().as_secs_f64()));
        last = Instant::now();
    })?;
    let raw = cfg.train.raw_scale_metrics.then_some(&splits.standardizer);
    let test = evaluate(&model, &test_w, cfg.train.batch_size, raw)?;
    let baseline = naive_baseline(&test_w, raw)?;
    records.push(MetricsRecord::Test {
        dataset: ds.name.clone(),
        horizon: t,
        mse: test.mse,
        mae: test.mae,
        windows: test.windows,
        best_epoch: outcome.best_epoch,
        fingerprint: fingerprint.clone(),
    });
    records.push(MetricsRecord::Baseline {
        dataset: ds.name.clone(),
        horizon: t,
        mse: baseline.mse,
        mae: baseline.mae,
        windows: baseline.windows,
    });

    let meta = CheckpointMeta {
        dataset: ds.name.clone(),
        max_rows: cfg.dataset.max_rows,
        fingerprint,
        seed: cfg.seed,
        split: spec,
        model: model_cfg,
        train: cfg.train.clone(),
    };
    Checkpoint::new(meta, &model).save(&out.join(CHECKPOINT_FILE))?;
    write_jsonl(&out.join(METRICS_FILE), &records)?;
    timings.push(TimingRecord::new("total", start.elapsed().as_secs_f64()));
    write_jsonl(&out.join(TIMINGS_FILE), &timings)?;
    Ok(TrainSummary { test, baseline, best_epoch: outcome.best_epoch, records })
}

/// Test-split metrics of a checkpoint. Data problems are reported before a
/// horizon that disagrees with the checkpoint.
pub fn run_eval(checkpoint: &Path, data: &Path, horizon: usize) -> AppResult<MetricsRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let meta = &ck.meta;
    let ds = load_csv_dataset(data, &LoadOptions { max_rows: meta.max_rows })?;
    if ds.num_channels() != meta.model.channels {
        return Err(AppError::Data(format!(
            "{} has {} channels but the checkpoint expects {}",
            ds.name,
            ds.num_channels(),
            meta.model.channels
        )));
    }
    if horizon == 0 {
        return Err(AppError::Config("horizon must be positive".into()));
    }
    let splits = split_dataset(&ds, &meta.split, meta.model.lookback)?;
    let test_w = make_windows(&splits.test, meta.model.lookback, horizon, meta.train.eval_stride)?;
    if horizon != meta.model.horizon {
        return Err(AppError::Config(format!(
            "checkpoint forecasts {} steps, requested horizon {horizon}",
            meta.model.horizon
        )));
    }
    let raw = meta.train.raw_scale_metrics.then_some(&splits.standardizer);
    let m = evaluate(&model, &test_w, meta.train.batch_size, raw)?;
    Ok(MetricsRecord::Test {
        dataset: ds.name,
        horizon,
        mse: m.mse,
        mae: m.mae,
        windows: m.windows,
        best_epoch: None,
        fingerprint: meta.fingerprint.clone(),
    })
}

/// Model and data used by `gradcheck --preset tiny`.
pub fn tiny_preset() -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 6,
        channels: 3,
        patch_len: 4,
        stride: 2,
        n_t: 4,
        n_f: 3,
        d_m: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_width: 16,
        lra_layers: 1,
        d_r: 2,
        dropout: 0.0,
    }
}

/// End-to-end finite-difference check of the MSE loss on a random batch.
/// `inject_fault` adds a term whose value is zero but whose recorded
/// gradient w.r.t. `psi` is one, so the check must fail.
pub fn run_gradcheck(preset: &str, inject_fault: bool) -> AppResult<GradcheckReport> {
    let cfg = match preset {
        "tiny" => tiny_preset(),
        other => return Err(AppError::Config(format!("unknown gradcheck preset '{other}' (available: tiny)"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Jtft::new(cfg.clone(), &mut rng)?;
    let uniform = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("shape")
    };
    let x = uniform(&mut rng, &[2, cfg.channels, cfg.lookback]);
    let y = uniform(&mut rng, &[2, cfg.channels, cfg.horizon]);
    let psi = model.psi();
    let mut params = model.into_params();
    let report = finite_diff_gradcheck(
        |tape, store| {
            let m = Jtft::from_params(cfg.clone(), store.clone())?;
            let pred = m.forward(tape, &x, false, &mut rand::rngs::mock::StepRng::new(0, 0))?;
            let target = tape.constant(&y);
            let loss = tape.mse(pred, target)?;
            match (inject_fault, psi) {
                (true, Some(id)) => {
                    let p = tape.param(store, id);
                    let frozen = tape.constant(store.get(id));
                    let zero = tape.sub(p, frozen)?;
                    let zero = tape.sum(zero);
                    tape.add(loss, zero)
                }
                _ => Ok(loss),
            }
        },
        &mut params,
        &GradcheckOptions::default(),
    )?;
    Ok(report)
}
