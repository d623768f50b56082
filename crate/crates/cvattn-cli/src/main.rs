//! Command line front end for the cvattn toolkit.
//!
//! Subcommands: `train` runs a full training loop and leaves a manifest,
//! per-epoch metrics and the best checkpoint in a run directory; `eval`
//! re-scores such a checkpoint on any split; `verify` runs the invariant and
//! gradient self-checks; `params` prints parameter counts; `gen-data` writes
//! a synthetic dataset to one file.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed verify checks),
//! 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cvattn::config::{self, RunConfig};
use cvattn::error::{CvError, Result};
use cvattn::model::Model;
use cvattn::scalar::{Dtype, Scalar};
use cvattn::tasks::{self, Splits};
use cvattn::train::{self, EvalKind};
use cvattn::verify;
use cvattn::{Kernel, Variant};

#[derive(Parser)]
#[command(name = "cvattn", version, about = "Complex-valued transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that builds a configuration. Resolution
/// order: preset, then config file, then individual flags.
#[derive(Args)]
struct ConfigArgs {
    /// Starting preset: toy-classification, toy-sequence or paper-full
    #[arg(long, default_value = "toy-classification")]
    preset: String,
    /// Config file layered over the preset ([model], [task], [train] sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attention variant: catt, aatt, apatt, riatt, yang or real
    #[arg(long)]
    variant: Option<String>,
    /// Score kernel: dot (conjugated) or qkt (plain)
    #[arg(long)]
    kernel: Option<String>,
    /// Master seed for initialization, data synthesis, shuffling and dropout
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision: f32 or f64
    #[arg(long)]
    precision: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = config::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            config::apply_config_text(&mut cfg, &text)?;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = Variant::parse(v)?;
        }
        if let Some(k) = &self.kernel {
            cfg.model.kernel = Kernel::parse(k)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = Dtype::parse(p).ok_or_else(|| CvError::Config {
                key: "precision".into(),
                message: format!("expected f32 or f64, got {p:?}"),
            })?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing manifest, metrics and checkpoint to a run directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a finished run's checkpoint on one data split
    Eval {
        /// Run directory written by `train`
        #[arg(long)]
        run: PathBuf,
        /// Split to score: train, val or test
        #[arg(long, default_value = "val")]
        split: String,
        /// Decode step by step, feeding back the model's own hard labels
        /// (the default for sequence models)
        #[arg(long, conflicts_with = "teacher_forced")]
        autoregressive: bool,
        /// Score with ground-truth labels in the decoder
        #[arg(long)]
        teacher_forced: bool,
    },
    /// Run the self-check suites and print a pass/fail table
    Verify {
        /// Which checks: invariants, gradients or all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Random draws per gradient check
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Print parameter counts per module for a configuration
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Synthesize a dataset and write it to one file
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = install_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CvError::Config { .. } | CvError::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// `CVATTN_THREADS` caps the rayon pool; unset leaves rayon's default.
fn install_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("CVATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| CvError::Config {
        key: "CVATTN_THREADS".into(),
        message: format!("cannot parse {raw:?} as a thread count"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CvError::Config {
            key: "CVATTN_THREADS".into(),
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { cfg, out } => {
            cmd_train(cfg.resolve()?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            run,
            split,
            autoregressive,
            teacher_forced,
        } => {
            cmd_eval(&run, &split, autoregressive, teacher_forced)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, seeds } => cmd_verify(&suite, seeds),
        Command::Params { cfg } => {
            cmd_params(cfg.resolve()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData { cfg, out } => {
            cmd_gen_data(cfg.resolve()?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cast_splits<T: Scalar>(data: &Splits<f64>) -> Splits<T> {
    Splits {
        train: tasks::cast_samples(&data.train),
        val: tasks::cast_samples(&data.val),
        test: tasks::cast_samples(&data.test),
    }
}

fn cmd_train(cfg: RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("manifest.txt"), cfg.manifest_string())?;
    match cfg.precision {
        Dtype::F32 => run_train::<f32>(&cfg, out),
        Dtype::F64 => run_train::<f64>(&cfg, out),
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    println!(
        "training {}/{} on the {} task ({}, seed {})",
        cfg.model.variant, cfg.model.kernel, cfg.task.task, cfg.precision, cfg.seed
    );
    let data = cast_splits::<T>(&tasks::generate(&cfg.task)?);
    let mut model = Model::<T>::init(cfg.model.clone(), cfg.seed)?;
    println!(
        "{} samples ({} train), {} trainable scalars",
        cfg.task.n_samples,
        data.train.len(),
        model.n_scalars()
    );
    let started = Instant::now();
    let outcome = train::train_loop(&mut model, &data, &cfg.train, &out.join("model.ckpt"))?;
    for row in &outcome.history {
        println!(
            "epoch {:>3} {:<5} loss {:.6} micro_ap {:.4}",
            row.epoch, row.split, row.loss, row.micro_ap
        );
    }
    let mut rows = outcome.history.clone();
    rows.push(outcome.test.clone());
    train::write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    println!(
        "best epoch {}; test loss {} micro_ap {} ({:.1}s)",
        outcome.best_epoch,
        outcome.test.loss,
        outcome.test.micro_ap,
        started.elapsed().as_secs_f64()
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(run: &Path, split: &str, autoregressive: bool, teacher_forced: bool) -> Result<()> {
    let manifest = std::fs::read_to_string(run.join("manifest.txt"))?;
    let cfg = config::parse_manifest(&manifest)?;
    match cfg.precision {
        Dtype::F32 => run_eval::<f32>(&cfg, run, split, autoregressive, teacher_forced),
        Dtype::F64 => run_eval::<f64>(&cfg, run, split, autoregressive, teacher_forced),
    }
}

fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    run: &Path,
    split: &str,
    autoregressive: bool,
    teacher_forced: bool,
) -> Result<()> {
    // the default matches how training scored this model's val split, so a
    // plain `eval --split val` reproduces the recorded metric
    let kind = if autoregressive {
        EvalKind::Autoregressive
    } else if teacher_forced {
        EvalKind::TeacherForced
    } else {
        train::eval_kind(cfg.task.seq_out > 0)
    };
    if kind == EvalKind::Autoregressive && cfg.task.seq_out == 0 {
        return Err(CvError::InvalidArgument(
            "this run trained a classification model; autoregressive decoding needs a sequence model"
                .into(),
        ));
    }
    let data = tasks::generate(&cfg.task)?;
    let samples = tasks::cast_samples::<T>(data.split(split)?);
    let mut model = Model::<T>::init(cfg.model.clone(), cfg.seed)?;
    model.load(&run.join("model.ckpt"))?;
    let (loss, ap) = train::evaluate(&model, &samples, kind)?;
    println!("split={split} loss={loss} micro_ap={ap}");
    Ok(())
}

fn cmd_verify(suite: &str, seeds: u64) -> Result<ExitCode> {
    let started = Instant::now();
    let rows = match suite {
        "invariants" => verify::invariant_suite(),
        "gradients" => verify::gradient_suite(seeds),
        "all" => verify::all_suites(seeds),
        other => {
            return Err(CvError::Config {
                key: "suite".into(),
                message: format!("expected invariants|gradients|all, got {other:?}"),
            })
        }
    };
    let mut failed = 0;
    for row in &rows {
        if !row.passed {
            failed += 1;
        }
        println!(
            "[{}] {:<10} {:<62} {}",
            if row.passed { " ok " } else { "FAIL" },
            row.suite,
            row.name,
            row.detail
        );
    }
    println!(
        "{} checks, {} failed ({:.2}s)",
        rows.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_params(cfg: RunConfig) -> Result<()> {
    match cfg.precision {
        Dtype::F32 => run_params::<f32>(&cfg),
        Dtype::F64 => run_params::<f64>(&cfg),
    }
}

fn run_params<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let model = Model::<T>::init(cfg.model.clone(), cfg.seed)?;
    println!(
        "{}/{}: d_model {}, {} layers, {} heads, d_ff {}",
        cfg.model.variant,
        cfg.model.kernel,
        cfg.model.d_model,
        cfg.model.n_layers,
        cfg.model.n_heads,
        cfg.model.d_ff
    );
    for (name, count) in model.param_counts() {
        println!("{name:<12} {count:>12}");
    }
    println!("{:<12} {:>12}", "total", model.n_scalars());
    Ok(())
}

fn cmd_gen_data(cfg: RunConfig, out: &Path) -> Result<()> {
    let splits = tasks::generate(&cfg.task)?;
    tasks::save_dataset(out, &cfg.task, &splits)?;
    let [tr, va, te] = cfg.task.split_sizes();
    println!(
        "wrote {} ({} train / {} val / {} test samples)",
        out.display(),
        tr,
        va,
        te
    );
    Ok(())
}
