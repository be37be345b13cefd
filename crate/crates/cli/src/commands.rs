use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kfs_core::checkpoint;
use kfs_core::data::{load_csv, SplitKind};
use kfs_core::gradcheck::{fixture, gradcheck, tiny_config, GradcheckOptions, GradcheckReport};
use kfs_core::model::{FilterKind, KfsConfig, KfsModel};
use kfs_core::studies::{denoise_series, run_denoise_study, DenoiseRow, DenoiseStudy, WindowReport};
use kfs_core::tensor::BackwardFault;
use kfs_core::train::{evaluate, train, Metrics};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.kfs";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Machine-readable result of one training run. Contains no wall-clock
/// data, so identical inputs give identical files.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub test: Metrics,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Trains per `cfg`, writing checkpoint, history, summary, resolved config
/// and timing into `out`. Nothing is written if the config or data are
/// invalid.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunSummary> {
    let clock = Instant::now();
    cfg.validate()?;
    let raw = cfg.load_series()?;
    let ds = cfg.dataset_for(&raw, cfg.model.lookback, cfg.model.horizon)?;
    let mut model = KfsModel::new(cfg.model.clone(), cfg.train.seed)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut tc = cfg.train.clone();
    tc.history_path = Some(out.join(HISTORY_FILE));
    let outcome = train(&mut model, &ds, &tc)?;
    let test = evaluate(&model, &ds, SplitKind::Test)?;
    checkpoint::save(&model, out.join(CHECKPOINT_FILE))?;

    let summary = RunSummary {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        lookback: cfg.model.lookback,
        horizon: cfg.model.horizon,
        channels: cfg.model.channels,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_mse: outcome.best_val_mse,
        test,
    };
    write(&out.join(SUMMARY_FILE), to_json(&summary))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let timing = serde_json::json!({ "wall_ms": clock.elapsed().as_millis() as u64 });
    write(&out.join(TIMING_FILE), to_json(&timing))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub checkpoint: PathBuf,
    pub horizon: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Arithmetic mean over rows.
    pub average: Metrics,
}

/// Test metrics of each checkpoint on the dataset named by `cfg`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<EvalReport> {
    if checkpoints.is_empty() {
        return Err(CliError::Config("no checkpoint given".into()));
    }
    let mut models = Vec::new();
    for path in checkpoints {
        let model = checkpoint::load(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
        models.push(model);
    }
    let raw = cfg.load_raw()?;
    let mut rows = Vec::new();
    for (path, model) in checkpoints.iter().zip(&models) {
        let mc = model.config();
        if mc.channels != raw.channels() {
            return Err(CliError::Checkpoint(format!(
                "{} expects {} channels, the dataset has {}",
                path.display(),
                mc.channels,
                raw.channels()
            )));
        }
        let ds = cfg.dataset_for(&raw, mc.lookback, mc.horizon)?;
        rows.push(EvalRow {
            checkpoint: path.clone(),
            horizon: mc.horizon,
            metrics: evaluate(model, &ds, SplitKind::Test)?,
        });
    }
    let n = rows.len() as f64;
    let average = Metrics {
        mse: rows.iter().map(|r| r.metrics.mse).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.metrics.mae).sum::<f64>() / n,
    };
    Ok(EvalReport { rows, average })
}

#[derive(Clone, Debug)]
pub struct DenoiseOptions {
    pub input: PathBuf,
    /// Channel name or zero-based index among the value columns.
    pub channel: String,
    pub delta: f64,
    pub filter: FilterKind,
    pub window: usize,
    pub width: usize,
}

/// Writes `denoised.csv` (timestamp, original, filtered) and
/// `denoise_report.json` (one entry per window) into `out`.
pub fn run_denoise(opts: &DenoiseOptions, out: &Path) -> CliResult<Vec<WindowReport>> {
    if !(opts.delta > 0.0 && opts.delta <= 1.0) {
        return Err(CliError::Config(format!("delta {} outside (0, 1]", opts.delta)));
    }
    if !opts.input.exists() {
        return Err(CliError::Data(format!("{} does not exist", opts.input.display())));
    }
    let raw = load_csv(&opts.input)?;
    let col = raw
        .channel_names
        .iter()
        .position(|n| *n == opts.channel)
        .or_else(|| opts.channel.parse::<usize>().ok().filter(|&i| i < raw.channels()))
        .ok_or_else(|| CliError::Config(format!("no channel `{}` in {}", opts.channel, opts.input.display())))?;
    let x = raw.values.column(col);
    let (y, reports) = denoise_series(&x, opts.window, opts.filter, opts.delta, opts.width)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let csv_path = out.join("denoised.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    let name = &raw.channel_names[col];
    let mut emit = |rec: &[String]| w.write_record(rec).map_err(|e| CliError::Data(e.to_string()));
    emit(&["date".into(), name.clone(), format!("{name}_filtered")])?;
    for ((ts, a), b) in raw.timestamps.iter().zip(&x).zip(&y) {
        emit(&[ts.format("%Y-%m-%d %H:%M:%S").to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    write(&out.join("denoise_report.json"), to_json(&reports))?;
    Ok(reports)
}

pub fn theorem2_table(rows: &[DenoiseRow]) -> String {
    let mut s = String::from("sigma\tdelta\ttrials\timproved_fraction\tmedian_ratio\tmean_k\n");
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            r.sigma,
            r.delta,
            r.trials,
            opt(r.improved_fraction),
            opt(r.median_ratio),
            r.mean_k
        );
    }
    s
}

pub fn run_theorem2(study: &DenoiseStudy) -> CliResult<String> {
    if study.trials == 0 {
        return Err(CliError::Config("trials must be positive".into()));
    }
    Ok(theorem2_table(&run_denoise_study(study)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Delta,
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

/// Trains one run per grid value in `out/point-{i}`. A failing point is
/// recorded and the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, grid: &[f64], out: &Path) -> CliResult<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(CliError::Config("empty sweep grid".into()));
    }
    base.validate()?;
    let mut points = Vec::new();
    for (i, &value) in grid.iter().enumerate() {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Delta => cfg.model.delta = value,
            SweepAxis::Alpha => cfg.train.alpha = value,
        }
        let dir = out.join(format!("point-{i}"));
        let result = run_training(&cfg, &dir);
        points.push(match result {
            Ok(s) => SweepPoint {
                value,
                summary: Some(s),
                error: None,
            },
            Err(e) => SweepPoint {
                value,
                summary: None,
                error: Some(e.to_string()),
            },
        });
    }
    let mut table = String::from("value\tbest_val_mse\ttest_mse\ttest_mae\tstatus\n");
    for p in &points {
        match &p.summary {
            Some(s) => {
                let _ = writeln!(
                    table,
                    "{}\t{:.6}\t{:.6}\t{:.6}\tok",
                    p.value,
                    s.best_val_mse.unwrap_or(f64::NAN),
                    s.test.mse,
                    s.test.mae
                );
            }
            None => {
                let _ = writeln!(table, "{}\t\t\t\tfailed: {}", p.value, p.error.as_deref().unwrap_or(""));
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join("sweep.tsv"), table)?;
    Ok(points)
}

/// Finite-difference check of every parameter group on a small model.
pub fn run_gradcheck(model_cfg: Option<KfsConfig>, seed: u64, fault: Option<BackwardFault>) -> CliResult<GradcheckReport> {
    let cfg = model_cfg.unwrap_or_else(tiny_config);
    let (model, windows) = fixture(cfg, seed, 2)?;
    let horizon = model.config().horizon;
    let opts = GradcheckOptions {
        loss_topk: 4.min(horizon / 2 + 1),
        fault,
        ..GradcheckOptions::default()
    };
    Ok(gradcheck(&model, &windows, &opts)?)
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut s = String::from("group\tentries\tmax_rel_err\tstatus\n");
    for g in &report.groups {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.3e}\t{}",
            g.name,
            g.entries,
            g.max_rel_err,
            if g.max_rel_err < report.threshold { "ok" } else { "FAIL" }
        );
    }
    s
}
