//! Series ingestion, chronological splitting, standardization, sliding
//! windows and seeded synthetic signals.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KfsError, Result};
use crate::model::stamp_features;
use crate::tensor::Tensor;

/// Lower clamp on standard deviations used for scaling.
pub const STD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    /// `[T × C]`
    pub values: Tensor,
    pub channel_names: Vec<String>,
}

impl RawSeries {
    /// Validates strictly increasing, equally spaced timestamps.
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.rows() != timestamps.len() || values.cols() != channel_names.len() {
            return Err(KfsError::Data(format!(
                "values {:?} inconsistent with {} timestamps and {} channels",
                values.shape(),
                timestamps.len(),
                channel_names.len()
            )));
        }
        check_spacing(&timestamps)?;
        Ok(RawSeries {
            timestamps,
            values,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn step(&self) -> Option<TimeDelta> {
        match self.timestamps.as_slice() {
            [a, b, ..] => Some(*b - *a),
            _ => None,
        }
    }
}

fn check_spacing(ts: &[NaiveDateTime]) -> Result<()> {
    if ts.len() < 2 {
        return Ok(());
    }
    let step = ts[1] - ts[0];
    if step <= TimeDelta::zero() {
        return Err(KfsError::Data("timestamps are not strictly increasing at index 1".into()));
    }
    for i in 2..ts.len() {
        let d = ts[i] - ts[i - 1];
        if d <= TimeDelta::zero() {
            return Err(KfsError::Data(format!("timestamps are not strictly increasing at index {i}")));
        }
        if d != step {
            return Err(KfsError::Data(format!(
                "irregular spacing at index {i}: step {d} differs from {step}"
            )));
        }
    }
    Ok(())
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    const FORMATS: [&str; 5] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y/%m/%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Reads a headed CSV whose first column is a timestamp and whose other
/// columns are numeric channels. Errors carry 1-based file line and column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(&shown, e))?;
    let headers = reader.headers().map_err(|e| csv_error(&shown, e))?.clone();
    if headers.len() < 2 {
        return Err(KfsError::Data(format!("{shown}: need a timestamp column and at least one channel")));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_error(&shown, e))?;
        let cell = |col: usize, msg: String| KfsError::Cell {
            path: shown.clone(),
            row: line,
            col: col + 1,
            msg,
        };
        let ts = record.get(0).unwrap_or("");
        timestamps.push(parse_timestamp(ts).ok_or_else(|| cell(0, format!("unparseable timestamp `{ts}`")))?);
        for col in 1..record.len() {
            let raw = record[col].trim();
            if raw.is_empty() {
                return Err(cell(col, "missing value".into()));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| cell(col, format!("not a number: `{raw}`")))?;
            if !v.is_finite() {
                return Err(cell(col, format!("non-finite value `{raw}`")));
            }
            data.push(v);
        }
    }
    let values = Tensor::new(vec![timestamps.len(), channel_names.len()], data)
        .map_err(|e| KfsError::Data(format!("{shown}: {e}")))?;
    if timestamps.is_empty() {
        return Err(KfsError::Data(format!("{shown}: no data rows")));
    }
    RawSeries::new(timestamps, values, channel_names).map_err(|e| KfsError::Data(format!("{shown}: {e}")))
}

fn csv_error(path: &str, e: csv::Error) -> KfsError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        return KfsError::Data(format!("{path}: {e}"));
    }
    match e.position() {
        Some(pos) => KfsError::Cell {
            path: path.into(),
            row: pos.line() as usize,
            col: 0,
            msg: e.to_string(),
        },
        None => KfsError::Data(format!("{path}: {e}")),
    }
}

/// Proportions of train/validation/test rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio(pub [usize; 3]);

impl SplitRatio {
    pub const ETT: SplitRatio = SplitRatio([6, 2, 2]);
    pub const STANDARD: SplitRatio = SplitRatio([7, 1, 2]);

    /// Row counts with floor rounding on train and validation.
    pub fn boundaries(&self, total: usize) -> [usize; 3] {
        let sum: usize = self.0.iter().sum();
        let train = total * self.0[0] / sum;
        let val = total * self.0[1] / sum;
        [train, val, total - train - val]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

/// Per-channel z-score fitted on the training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(values: &Tensor, rows: Range<usize>) -> Self {
        let c = values.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(values.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_EPS)).collect();
        Scaler { mean, std }
    }

    pub fn transform(&self, values: &Tensor) -> Tensor {
        let c = values.cols();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }

    pub fn inverse(&self, values: &Tensor) -> Tensor {
        let c = values.cols();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
        out
    }
}

/// One forecasting example.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[L × C]`
    pub x: Tensor,
    /// `[F × C]`
    pub y: Tensor,
    /// `[L × 5]`
    pub stamps_x: Tensor,
    /// `[F × 5]`
    pub stamps_y: Tensor,
}

/// A standardized series split into contiguous train/val/test ranges.
/// Windows are drawn entirely inside one range.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// Standardized values `[T × C]`.
    pub values: Tensor,
    /// Calendar features `[T × 5]`.
    pub stamps: Tensor,
    pub timestamps: Vec<NaiveDateTime>,
    pub channel_names: Vec<String>,
    pub scaler: Scaler,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

pub fn split_and_scale(raw: &RawSeries, ratio: SplitRatio, lookback: usize, horizon: usize) -> Result<WindowedDataset> {
    let [tr, va, te] = ratio.boundaries(raw.len());
    let train = 0..tr;
    let val = tr..tr + va;
    let test = tr + va..tr + va + te;
    for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
        if r.len() < lookback + horizon {
            return Err(KfsError::Data(format!(
                "{name} split has {} rows, fewer than lookback {lookback} + horizon {horizon}",
                r.len()
            )));
        }
    }
    let scaler = Scaler::fit(&raw.values, train.clone());
    Ok(WindowedDataset {
        values: scaler.transform(&raw.values),
        stamps: stamp_features(&raw.timestamps)?,
        timestamps: raw.timestamps.clone(),
        channel_names: raw.channel_names.clone(),
        scaler,
        train,
        val,
        test,
        lookback,
        horizon,
    })
}

impl WindowedDataset {
    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn range(&self, split: SplitKind) -> Range<usize> {
        match split {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }

    pub fn window_count(&self, split: SplitKind) -> usize {
        (self.range(split).len() + 1).saturating_sub(self.lookback + self.horizon)
    }

    /// Absolute start rows of every window in `split`, in order.
    pub fn window_starts(&self, split: SplitKind) -> Vec<usize> {
        let r = self.range(split);
        (0..self.window_count(split)).map(|i| r.start + i).collect()
    }

    /// The window whose lookback begins at absolute row `start`.
    pub fn window_at(&self, start: usize) -> Window {
        let (l, f) = (self.lookback, self.horizon);
        Window {
            x: self.values.slice_rows(start, l),
            y: self.values.slice_rows(start + l, f),
            stamps_x: self.stamps.slice_rows(start, l),
            stamps_y: self.stamps.slice_rows(start + l, f),
        }
    }

    pub fn make_windows(&self, split: SplitKind) -> impl Iterator<Item = Window> + '_ {
        self.window_starts(split).into_iter().map(|s| self.window_at(s))
    }
}

/// One sinusoid: `amplitude · cos(2π·bin·t/length + phase_c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub bin: f64,
    pub amplitude: f64,
    /// One phase per channel, or a single phase shared by all channels.
    #[serde(default)]
    pub phases: Vec<f64>,
}

/// Declarative description of a seeded synthetic multichannel series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub channels: usize,
    pub tones: Vec<Tone>,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: NaiveDateTime,
    #[serde(default = "default_step_minutes")]
    pub step_minutes: i64,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

fn default_step_minutes() -> i64 {
    60
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.channels == 0 {
            return Err(KfsError::Config("synthetic series needs length ≥ 2 and ≥ 1 channel".into()));
        }
        let nyquist = (self.length / 2) as f64;
        for (i, t) in self.tones.iter().enumerate() {
            if !(t.bin >= 0.0 && t.bin <= nyquist) {
                return Err(KfsError::Config(format!(
                    "tone {i}: bin {} outside [0, {nyquist}]",
                    t.bin
                )));
            }
            if !(t.phases.is_empty() || t.phases.len() == 1 || t.phases.len() == self.channels) {
                return Err(KfsError::Config(format!(
                    "tone {i}: {} phases for {} channels",
                    t.phases.len(),
                    self.channels
                )));
            }
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(KfsError::Config(format!("sigma {} must be ≥ 0", self.sigma)));
        }
        if self.step_minutes <= 0 {
            return Err(KfsError::Config("step_minutes must be positive".into()));
        }
        Ok(())
    }
}

/// Returns `(clean, noisy)`, each `[length × channels]`.
///
/// Noise is i.i.d. `N(0, σ²)` drawn with the ziggurat sampler over a
/// ChaCha8 stream seeded by `seed`, in row-major order.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let (n, c) = (spec.length, spec.channels);
    let mut clean = vec![0.0; n * c];
    for tone in &spec.tones {
        for ch in 0..c {
            let phase = match tone.phases.len() {
                0 => 0.0,
                1 => tone.phases[0],
                _ => tone.phases[ch],
            };
            for t in 0..n {
                clean[t * c + ch] += tone.amplitude * (2.0 * PI * tone.bin * t as f64 / n as f64 + phase).cos();
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + spec.sigma * z
        })
        .collect();
    Ok((Tensor::new(vec![n, c], clean)?, Tensor::new(vec![n, c], noisy)?))
}

/// The noisy synthetic series with an evenly spaced timestamp column.
pub fn synth_series(spec: &SynthSpec) -> Result<RawSeries> {
    let (_, noisy) = synth_generate(spec)?;
    let step = TimeDelta::minutes(spec.step_minutes);
    let timestamps = (0..spec.length).map(|i| spec.start + step * i as i32).collect();
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    RawSeries::new(timestamps, noisy, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn hourly(n: usize) -> Vec<NaiveDateTime> {
        (0..n).map(|i| default_start() + TimeDelta::hours(i as i64)).collect()
    }

    fn ramp_series(n: usize, c: usize) -> RawSeries {
        let data = (0..n * c).map(|i| (i as f64 * 0.37).sin() + i as f64 * 0.01).collect();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        RawSeries::new(hourly(n), Tensor::new(vec![n, c], data).unwrap(), names).unwrap()
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_csv("date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4\n2016-07-01 02:00:00,5,6.5\n");
        let raw = load_csv(f.path()).unwrap();
        assert_eq!(raw.values.shape(), &[3, 2]);
        assert_eq!(raw.values.at(2, 1), 6.5);
        assert_eq!(raw.step(), Some(TimeDelta::hours(1)));
        assert_eq!(raw.channel_names, vec!["a", "b"]);
    }

    #[test]
    fn blank_cell_is_addressed() {
        let f = write_csv("date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,,4\n");
        match load_csv(f.path()) {
            Err(KfsError::Cell { row, col, .. }) => assert_eq!((row, col), (3, 2)),
            other => panic!("expected cell error, got {other:?}"),
        }
    }

    #[test]
    fn irregular_spacing_rejected() {
        let f = write_csv("date,a\n2016-07-01 00:00,1\n2016-07-01 01:00,2\n2016-07-01 03:00,3\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("index 2"), "{err}");
    }

    #[test]
    fn ett_shaped_file() {
        let mut body = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for (i, ts) in hourly(50).iter().enumerate() {
            body.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
            for c in 0..7 {
                body.push_str(&format!(",{}", (i * 7 + c) as f64 * 0.1));
            }
            body.push('\n');
        }
        let raw = load_csv(write_csv(&body).path()).unwrap();
        assert_eq!(raw.channels(), 7);
        assert_eq!(raw.step(), Some(TimeDelta::hours(1)));
    }

    #[test]
    fn split_boundaries() {
        assert_eq!(SplitRatio::ETT.boundaries(100), [60, 20, 20]);
        assert_eq!(SplitRatio::ETT.boundaries(14400), [8640, 2880, 2880]);
        assert_eq!(SplitRatio::STANDARD.boundaries(100), [70, 10, 20]);
    }

    #[test]
    fn scaler_standardizes_train_range() {
        let raw = ramp_series(100, 3);
        let ds = split_and_scale(&raw, SplitRatio::ETT, 4, 2).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = ds.train.clone().map(|r| ds.values.at(r, c)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
        let back = ds.scaler.inverse(&ds.values);
        assert!(back.max_abs_diff(&raw.values) < 1e-9);
    }

    #[test]
    fn short_split_named() {
        let raw = ramp_series(40, 1);
        let err = split_and_scale(&raw, SplitRatio::ETT, 6, 4).unwrap_err().to_string();
        assert!(err.contains("val"), "{err}");
    }

    #[test]
    fn window_counts_and_contents() {
        let raw = ramp_series(100, 2);
        let ds = split_and_scale(&raw, SplitRatio::ETT, 12, 8).unwrap();
        // val range has exactly L+F rows ⇒ one window
        assert_eq!(ds.window_count(SplitKind::Val), 1);
        assert_eq!(ds.window_count(SplitKind::Train), 60 - 20 + 1);
        let ds21 = split_and_scale(&ramp_series(105, 2), SplitRatio::ETT, 12, 8).unwrap();
        assert_eq!(ds21.val.len(), 21);
        assert_eq!(ds21.window_starts(SplitKind::Val), vec![63, 64]);

        let w = ds.window_at(5);
        for t in 0..12 {
            for c in 0..2 {
                assert_eq!(w.x.at(t, c), ds.values.at(5 + t, c));
            }
        }
        assert_eq!(w.y.at(0, 1), ds.values.at(17, 1));
        assert_eq!(w.stamps_y.row(7), ds.stamps.row(24));
        assert_eq!(ds.window_starts(SplitKind::Test), ds.window_starts(SplitKind::Test));
    }

    #[test]
    fn windows_stay_inside_splits() {
        let ds = split_and_scale(&ramp_series(300, 1), SplitRatio::STANDARD, 16, 8).unwrap();
        for split in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let r = ds.range(split);
            for s in ds.window_starts(split) {
                assert!(s >= r.start && s + 24 <= r.end);
            }
        }
    }

    fn spec(tones: Vec<Tone>, sigma: f64) -> SynthSpec {
        SynthSpec {
            length: 96,
            channels: 2,
            tones,
            sigma,
            seed: 11,
            start: default_start(),
            step_minutes: 60,
        }
    }

    #[test]
    fn synth_zero_is_zero() {
        let (clean, noisy) = synth_generate(&spec(vec![], 0.0)).unwrap();
        assert!(clean.data().iter().chain(noisy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn synth_one_tone_has_one_bin() {
        let tone = Tone {
            bin: 5.0,
            amplitude: 1.3,
            phases: vec![0.2, 1.0],
        };
        let (clean, _) = synth_generate(&spec(vec![tone], 0.0)).unwrap();
        for c in 0..2 {
            let s = crate::spectral::rdft(&clean.column(c)).unwrap();
            let nonzero: Vec<usize> = s
                .coeffs()
                .iter()
                .enumerate()
                .filter(|(_, z)| z.norm() > 1e-9)
                .map(|(k, _)| k)
                .collect();
            assert_eq!(nonzero, vec![5]);
        }
    }

    #[test]
    fn synth_bad_bin_rejected() {
        let tone = Tone {
            bin: 49.0,
            amplitude: 1.0,
            phases: vec![],
        };
        assert!(synth_generate(&spec(vec![tone], 0.0)).is_err());
    }

    #[test]
    fn synth_noise_variance_and_reproducibility() {
        let mut s = spec(vec![], 0.5);
        s.length = 50_000;
        let (clean, noisy) = synth_generate(&s).unwrap();
        let n = noisy.numel() as f64;
        let diffs: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.25).abs() < 0.025, "variance {var}");
        let (_, again) = synth_generate(&s).unwrap();
        assert_eq!(noisy, again);
    }
}
