//! `bgs` command line: synthetic dataset generation, staged training,
//! evaluation with calibrated stacking, calibration sweeps, and the
//! gradient-check suites.
//!
//! Exit codes: 0 success, 2 for configuration/usage problems, 1 for runtime
//! failures including gradient-check tolerance violations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use bgs_core::dataforge::{load_dataset, synth_dataset, AttributeTable, FeatureDataset, SynthConfig};
use bgs_core::eval::{evaluate, sweep_delta, write_sweep_csv};
use bgs_core::gradcheck::run_gradcheck;
use bgs_core::pipeline::{load_checkpoint, run_training, save_checkpoint, TrainPlan};

#[derive(Parser)]
#[command(name = "bgs", version, about = "Zero-shot classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write its files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the full training pipeline; writes checkpoint and training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate over the configured calibration offsets; writes a CSV.
    SweepDelta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Verify closed-form gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CliConfig {
    seed: u64,
    dataset: DatasetConfig,
    plan: TrainPlan,
    eval: EvalConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum DatasetConfig {
    Synth(SynthConfig),
    Files {
        features: PathBuf,
        attributes: PathBuf,
        splits: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    delta: f64,
    #[serde(default)]
    delta_sweep: Vec<f64>,
}

fn load_config(path: &Path, seed_override: Option<u64>) -> anyhow::Result<CliConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    let mut cfg: CliConfig =
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("bad config: {e}"))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    // one master seed drives data generation and training
    cfg.plan.seed = cfg.seed;
    if let DatasetConfig::Synth(ref mut s) = cfg.dataset {
        s.seed = cfg.seed;
    }
    cfg.plan.validate()?;
    Ok(cfg)
}

fn get_dataset(cfg: &CliConfig) -> anyhow::Result<(FeatureDataset, AttributeTable)> {
    match &cfg.dataset {
        DatasetConfig::Synth(s) => Ok(synth_dataset(s)?),
        DatasetConfig::Files {
            features,
            attributes,
            splits,
        } => Ok(load_dataset(features, attributes, splits)?),
    }
}

/// Error plus the process exit code it maps to.
struct CliError {
    code: u8,
    err: anyhow::Error,
}

impl CliError {
    fn config(err: anyhow::Error) -> Self {
        CliError { code: 2, err }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError {
            code: 1,
            err: e.into(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed).map_err(CliError::config)?;
            let DatasetConfig::Synth(ref s) = cfg.dataset else {
                return Err(CliError::config(anyhow::anyhow!(
                    "synth requires a `dataset.synth` config section"
                )));
            };
            let (ds, attrs) = synth_dataset(s)?;
            bgs_core::dataforge::save_dataset(&out, &ds, &attrs)?;
            println!(
                "wrote {} instances ({} seen / {} unseen classes) to {}",
                ds.len(),
                ds.seen_classes().len(),
                ds.unseen_classes().len(),
                out.display()
            );
        }
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed).map_err(CliError::config)?;
            let (ds, attrs) = get_dataset(&cfg)?;
            let (model, log) = run_training(&cfg.plan, &ds, &attrs)?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(&model, &cfg.plan, &out.join("checkpoint.json"))?;
            log.write_csv(&out.join("trainlog.csv"))?;
            let last = log.rows.last();
            println!(
                "trained {} epochs (final L_s {}), checkpoint in {}",
                log.rows.len(),
                last.map_or(f64::NAN, |r| r.l_s),
                out.display()
            );
        }
        Cmd::Eval {
            config,
            seed,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config, seed).map_err(CliError::config)?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let (ds, attrs) = get_dataset(&cfg)?;
            let report = evaluate(&model, &ds, &attrs, cfg.eval.delta)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.json"), json)?;
            }
        }
        Cmd::SweepDelta {
            config,
            seed,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config, seed).map_err(CliError::config)?;
            if cfg.eval.delta_sweep.is_empty() {
                return Err(CliError::config(anyhow::anyhow!(
                    "sweep-delta requires a non-empty `eval.delta_sweep` list"
                )));
            }
            let (model, _) = load_checkpoint(&checkpoint)?;
            let (ds, attrs) = get_dataset(&cfg)?;
            let rows = sweep_delta(&model, &ds, &attrs, &cfg.eval.delta_sweep)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&rows, &path)?;
            for (d, u, s, h) in &rows {
                println!("delta={d} U={u:.2} S={s:.2} H={h:.2}");
            }
            println!("wrote {}", path.display());
        }
        Cmd::Gradcheck { trials, tol, seed } => {
            let report = run_gradcheck(trials, tol, seed)?;
            println!("{}", report.summary());
            if !report.ok {
                return Err(anyhow::anyhow!("gradient check exceeded tolerance").into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.err);
            ExitCode::from(e.code)
        }
    }
}
