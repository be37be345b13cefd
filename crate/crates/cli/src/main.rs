use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kfs_cli::commands::{
    gradcheck_table, run_denoise, run_eval, run_gradcheck, run_sweep, run_theorem2, run_training, DenoiseOptions,
    SweepAxis,
};
use kfs_cli::{CliError, ExperimentConfig};
use kfs_core::model::FilterKind;
use kfs_core::studies::DenoiseStudy;
use kfs_core::tensor::BackwardFault;

/// Multi-scale frequency-selection forecasting experiments.
///
/// Exit codes: 0 ok, 2 config or data error, 3 checkpoint error,
/// 4 invariant failure.
#[derive(Parser)]
#[command(name = "kfs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.kfs, history.jsonl, summary.json,
    /// config.toml and timing.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed (used for initialization and shuffling).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides run.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split metrics for one or more checkpoints, plus their average.
    Eval {
        /// Config whose [data] section names the dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        /// Also write eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter one CSV channel in non-overlapping windows.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        /// Column name or zero-based index among the value columns.
        #[arg(long, default_value = "0")]
        channel: String,
        #[arg(long, default_value_t = 0.9)]
        delta: f64,
        #[arg(long, value_enum, default_value_t = Filter::Topk)]
        filter: Filter,
        #[arg(long, default_value_t = 96)]
        window: usize,
        /// Kernel width for the smoothing filters.
        #[arg(long, default_value_t = 5)]
        width: usize,
        #[arg(long, default_value = "runs/denoise")]
        out: PathBuf,
    },
    /// Monte Carlo comparison of top-K reconstruction against the noisy
    /// input on a five-tone signal.
    Theorem2 {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.95")]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write theorem2.tsv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per grid value of delta or alpha.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        /// Uses the [model] section; a small built-in model otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    Topk,
    MovingAverage,
    Gaussian,
    None,
}

impl From<Filter> for FilterKind {
    fn from(f: Filter) -> Self {
        match f {
            Filter::Topk => FilterKind::Topk,
            Filter::MovingAverage => FilterKind::MovingAverage,
            Filter::Gaussian => FilterKind::Gaussian,
            Filter::None => FilterKind::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Delta,
    Alpha,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Rational,
    Bias,
}

fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?.with_seed(seed);
    if let Some(o) = out {
        cfg.run.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let summary = run_training(&cfg, &cfg.run.out_dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            config,
            checkpoints,
            out,
        } => {
            let cfg = load(&config, None, None)?;
            let report = run_eval(&cfg, &checkpoints)?;
            println!("checkpoint\thorizon\tmse\tmae");
            for r in &report.rows {
                println!("{}\t{}\t{:.6}\t{:.6}", r.checkpoint.display(), r.horizon, r.metrics.mse, r.metrics.mae);
            }
            println!("average\t-\t{:.6}\t{:.6}", report.average.mse, report.average.mae);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let path = dir.join("eval.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                    .map_err(|e| CliError::io(&path, e))?;
            }
        }
        Command::Denoise {
            input,
            channel,
            delta,
            filter,
            window,
            width,
            out,
        } => {
            let opts = DenoiseOptions {
                input,
                channel,
                delta,
                filter: filter.into(),
                window,
                width,
            };
            let reports = run_denoise(&opts, &out)?;
            println!("start\tlen\tk\tenergy_ratio");
            for r in reports {
                let k = r.k.map_or("-".into(), |k| k.to_string());
                let e = r.energy_ratio.map_or("-".into(), |e| format!("{e:.6}"));
                println!("{}\t{}\t{k}\t{e}", r.start, r.len);
            }
        }
        Command::Theorem2 {
            trials,
            sigmas,
            deltas,
            seed,
            out,
        } => {
            let study = DenoiseStudy {
                trials,
                sigmas,
                deltas,
                seed,
                ..DenoiseStudy::default()
            };
            let table = run_theorem2(&study)?;
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let path = dir.join("theorem2.tsv");
                std::fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
            }
        }
        Command::Sweep {
            config,
            axis,
            grid,
            seed,
            out,
        } => {
            let cfg = load(&config, seed, out)?;
            let axis = match axis {
                Axis::Delta => SweepAxis::Delta,
                Axis::Alpha => SweepAxis::Alpha,
            };
            let points = run_sweep(&cfg, axis, &grid, &cfg.run.out_dir)?;
            let table = std::fs::read_to_string(cfg.run.out_dir.join("sweep.tsv")).context("reading sweep table")?;
            print!("{table}");
            if points.iter().any(|p| p.error.is_some()) {
                eprintln!("warning: some sweep points failed");
            }
        }
        Command::Gradcheck {
            config,
            seed,
            inject_fault,
        } => {
            let model_cfg = match config {
                Some(p) => Some(ExperimentConfig::load(&p)?.model),
                None => None,
            };
            let fault = inject_fault.map(|f| match f {
                Fault::Rational => BackwardFault::RationalNumer,
                Fault::Bias => BackwardFault::AffineBias,
            });
            let report = run_gradcheck(model_cfg, seed, fault)?;
            print!("{}", gradcheck_table(&report));
            if !report.passed() {
                let worst = report.worst().expect("non-empty report");
                return Err(CliError::Invariant(format!(
                    "gradient check failed: {} has relative error {:.3e} (threshold {:.0e})",
                    worst.name, worst.max_rel_err, report.threshold
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
