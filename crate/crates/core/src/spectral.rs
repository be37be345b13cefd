//! Real DFT, Parseval energy accounting and energy-threshold band selection.
//!
//! The one-sided spectrum of a length-`L` real series holds `⌊L/2⌋ + 1`
//! bins with the convention `Y[k] = Σ_t x[t]·e^{−2πi·kt/L}`. Energies are
//! reported so that `Σ_t x[t]² == (1/L)·Σ_k bin_energy[k]`: interior bins
//! stand in for their conjugate mirror and count twice.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{KfsError, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// One-sided spectrum of a real series.
#[derive(Clone, Debug, PartialEq)]
pub struct RSpectrum {
    coeffs: Vec<Complex64>,
    original_length: usize,
}

impl RSpectrum {
    pub fn new(coeffs: Vec<Complex64>, original_length: usize) -> Result<Self> {
        if original_length < 2 || coeffs.len() != original_length / 2 + 1 {
            return Err(KfsError::invalid(
                "rspectrum",
                format!(
                    "{} bins inconsistent with series length {original_length}",
                    coeffs.len()
                ),
            ));
        }
        Ok(RSpectrum {
            coeffs,
            original_length,
        })
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn bin_count(&self) -> usize {
        self.coeffs.len()
    }

    /// Copy keeping only `indices`; every other bin is zeroed.
    pub fn masked(&self, indices: &[usize]) -> RSpectrum {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); self.coeffs.len()];
        for &k in indices {
            coeffs[k] = self.coeffs[k];
        }
        RSpectrum {
            coeffs,
            original_length: self.original_length,
        }
    }
}

pub fn rdft(x: &[f64]) -> Result<RSpectrum> {
    let len = x.len();
    if len < 2 {
        return Err(KfsError::invalid("rdft", format!("length {len} < 2")));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf.truncate(len / 2 + 1);
    // DC and (even-length) Nyquist are real for real input.
    buf[0].im = 0.0;
    if len.is_multiple_of(2) {
        buf[len / 2].im = 0.0;
    }
    Ok(RSpectrum {
        coeffs: buf,
        original_length: len,
    })
}

pub fn irdft(spec: &RSpectrum) -> Result<Vec<f64>> {
    let len = spec.original_length;
    if len < 2 || spec.coeffs.len() != len / 2 + 1 {
        return Err(KfsError::invalid("irdft", "inconsistent spectrum length metadata"));
    }
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    for (k, &c) in spec.coeffs.iter().enumerate() {
        full[k] = c;
        if k != 0 && len - k != k {
            full[len - k] = c.conj();
        }
    }
    fft_in_place(&mut full, true);
    let inv = 1.0 / len as f64;
    Ok(full.iter().map(|c| c.re * inv).collect())
}

/// Per-bin share of the two-sided spectral energy `Σ_k |Y[k]|²`.
pub fn bin_energy(spec: &RSpectrum) -> Vec<f64> {
    let len = spec.original_length;
    spec.coeffs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mirrored = k != 0 && !(len.is_multiple_of(2) && k == len / 2);
            let w = if mirrored { 2.0 } else { 1.0 };
            w * c.norm_sqr()
        })
        .collect()
}

/// Bins retained by energy-threshold selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSelection {
    /// Ascending bin indices.
    pub kept_indices: Vec<usize>,
    pub k: usize,
    pub energy_ratio: f64,
    pub delta: f64,
}

/// Keeps the fewest highest-energy bins whose cumulative share exceeds
/// `delta`. Ties in energy go to the lower bin index.
pub fn topk_select(spec: &RSpectrum, delta: f64) -> Result<SpectralSelection> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(KfsError::invalid("topk_select", format!("delta {delta} not in (0, 1]")));
    }
    let energy = bin_energy(spec);
    let mut order: Vec<usize> = (0..energy.len()).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));

    // Summed in selection order so the running total reaches it exactly.
    let total: f64 = order.iter().map(|&k| energy[k]).sum();
    if total == 0.0 {
        return Ok(SpectralSelection {
            kept_indices: Vec::new(),
            k: 0,
            energy_ratio: 1.0,
            delta,
        });
    }

    let mut cumulative = 0.0;
    let mut kept = Vec::new();
    for &k in &order {
        kept.push(k);
        cumulative += energy[k];
        if cumulative / total > delta || cumulative >= total {
            break;
        }
    }
    let energy_ratio = cumulative / total;
    kept.sort_unstable();
    Ok(SpectralSelection {
        k: kept.len(),
        kept_indices: kept,
        energy_ratio,
        delta,
    })
}

/// Inverse transform of the selected bins only.
pub fn reconstruct_topk(x: &[f64], delta: f64) -> Result<(Vec<f64>, SpectralSelection)> {
    let spec = rdft(x)?;
    let sel = topk_select(&spec, delta)?;
    let out = irdft(&spec.masked(&sel.kept_indices))?;
    Ok((out, sel))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingKind {
    MovingAverage,
    Gaussian,
}

fn smoothing_kernel(kind: SmoothingKind, width: usize) -> Vec<f64> {
    match kind {
        SmoothingKind::MovingAverage => vec![1.0 / width as f64; width],
        SmoothingKind::Gaussian => {
            if width == 1 {
                return vec![1.0];
            }
            // ±3σ spans the window.
            let half = (width / 2) as f64;
            let sigma = half / 3.0;
            let raw: Vec<f64> = (0..width)
                .map(|i| {
                    let d = i as f64 - half;
                    (-0.5 * d * d / (sigma * sigma)).exp()
                })
                .collect();
            let norm: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / norm).collect()
        }
    }
}

/// Same-length smoothing with mirror (reflect) padding at both ends.
pub fn alt_filter(x: &[f64], kind: SmoothingKind, width: usize) -> Result<Vec<f64>> {
    let len = x.len();
    if width == 0 || width.is_multiple_of(2) {
        return Err(KfsError::invalid("alt_filter", format!("width {width} must be odd and ≥ 1")));
    }
    if width > len {
        return Err(KfsError::invalid(
            "alt_filter",
            format!("width {width} exceeds series length {len}"),
        ));
    }
    let kernel = smoothing_kernel(kind, width);
    let half = width / 2;
    let reflect = |i: isize| -> f64 {
        let n = len as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        x[j as usize]
    };
    Ok((0..len)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * reflect(t as isize + j as isize - half as isize))
                .sum()
        })
        .collect())
}
