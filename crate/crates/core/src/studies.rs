//! Denoising experiments on synthetic and user-supplied series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_generate, SynthSpec, Tone};
use crate::error::{KfsError, Result};
use crate::model::FilterKind;
use crate::spectral::{alt_filter, reconstruct_topk, SmoothingKind};

/// Monte Carlo comparison of top-K reconstruction against the raw noisy
/// series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseStudy {
    pub trials: usize,
    pub length: usize,
    pub amplitudes: Vec<f64>,
    pub bins: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub seed: u64,
}

impl Default for DenoiseStudy {
    fn default() -> Self {
        DenoiseStudy {
            trials: 1000,
            length: 96,
            amplitudes: vec![3.0, 2.0, 1.5, 1.0, 0.5],
            bins: vec![3.0, 7.0, 12.0, 18.0, 29.0],
            sigmas: vec![0.25, 0.5],
            deltas: vec![0.95],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub sigma: f64,
    pub delta: f64,
    pub trials: usize,
    /// Share of trials where the reconstruction is closer to the clean
    /// signal than the noisy input; `None` when every input was noiseless.
    pub improved_fraction: Option<f64>,
    /// Median of `‖x̃ − y₀‖ / ‖y − y₀‖`, taking `0/0` as 1 (round-off
    /// counts as zero).
    pub median_ratio: Option<f64>,
    pub mean_k: f64,
}

/// Relative error below which a reconstruction counts as exact.
const ROUNDOFF: f64 = 1e-9;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Runs every `(σ, δ)` pair. Trial `t` at sigma index `s` draws phases and
/// noise from ChaCha8 seeded with `seed` on stream `s·2³² + t`; every δ
/// sees the same noisy draws.
pub fn run_denoise_study(study: &DenoiseStudy) -> Result<Vec<DenoiseRow>> {
    if study.amplitudes.len() != study.bins.len() {
        return Err(KfsError::Config(format!(
            "{} amplitudes for {} bins",
            study.amplitudes.len(),
            study.bins.len()
        )));
    }
    for &d in &study.deltas {
        if !(d > 0.0 && d <= 1.0) {
            return Err(KfsError::Config(format!("delta {d} outside (0, 1]")));
        }
    }
    let mut rows = Vec::new();
    for (si, &sigma) in study.sigmas.iter().enumerate() {
        let nd = study.deltas.len();
        let mut ratios = vec![Vec::with_capacity(study.trials); nd];
        let mut improved = vec![0usize; nd];
        let mut noisy_trials = 0usize;
        let mut k_sum = vec![0usize; nd];
        for trial in 0..study.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
            rng.set_stream(((si as u64) << 32) | trial as u64);
            let tones = study
                .amplitudes
                .iter()
                .zip(&study.bins)
                .map(|(&amplitude, &bin)| Tone {
                    bin,
                    amplitude,
                    phases: vec![rng.random_range(0.0..std::f64::consts::TAU)],
                })
                .collect();
            let spec = SynthSpec {
                length: study.length,
                channels: 1,
                tones,
                sigma,
                seed: rng.random(),
                start: chrono::NaiveDateTime::default(),
                step_minutes: 60,
            };
            let (clean, noisy) = synth_generate(&spec)?;
            let raw = dist(noisy.data(), clean.data());
            let scale = clean.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            if raw > 0.0 {
                noisy_trials += 1;
            }
            for (di, &delta) in study.deltas.iter().enumerate() {
                let (rec, sel) = reconstruct_topk(noisy.data(), delta)?;
                k_sum[di] += sel.k;
                let err = dist(&rec, clean.data());
                let exact = err <= ROUNDOFF * scale;
                let ratio = match (exact, raw == 0.0) {
                    (true, true) => 1.0,
                    (false, true) => f64::INFINITY,
                    _ => err / raw,
                };
                ratios[di].push(ratio);
                if raw > 0.0 && err < raw {
                    improved[di] += 1;
                }
            }
        }
        for (di, &delta) in study.deltas.iter().enumerate() {
            rows.push(DenoiseRow {
                sigma,
                delta,
                trials: study.trials,
                improved_fraction: (noisy_trials > 0).then(|| improved[di] as f64 / noisy_trials as f64),
                median_ratio: median(std::mem::take(&mut ratios[di])),
                mean_k: if study.trials > 0 {
                    k_sum[di] as f64 / study.trials as f64
                } else {
                    0.0
                },
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start: usize,
    pub len: usize,
    pub k: Option<usize>,
    pub energy_ratio: Option<f64>,
}

/// Filters consecutive non-overlapping windows of `x`; the last window may
/// be shorter. Spectral statistics are reported for top-K only.
pub fn denoise_series(
    x: &[f64],
    window: usize,
    kind: FilterKind,
    delta: f64,
    width: usize,
) -> Result<(Vec<f64>, Vec<WindowReport>)> {
    if window == 0 {
        return Err(KfsError::Config("window must be positive".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut reports = Vec::new();
    for (i, chunk) in x.chunks(window).enumerate() {
        let smooth = |k| {
            let w = width.min(chunk.len());
            alt_filter(chunk, k, if w % 2 == 0 { w - 1 } else { w })
        };
        let (y, k, ratio) = match kind {
            FilterKind::Topk => {
                let (y, sel) = reconstruct_topk(chunk, delta)?;
                (y, Some(sel.k), Some(sel.energy_ratio))
            }
            FilterKind::None => (chunk.to_vec(), None, None),
            FilterKind::MovingAverage => (smooth(SmoothingKind::MovingAverage)?, None, None),
            FilterKind::Gaussian => (smooth(SmoothingKind::Gaussian)?, None, None),
        };
        out.extend(y);
        reports.push(WindowReport {
            start: i * window,
            len: chunk.len(),
            k,
            energy_ratio: ratio,
        });
    }
    Ok((out, reports))
}
