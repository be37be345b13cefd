//! Central finite-difference verification of the full training backward.

use chrono::{NaiveDate, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::Window;
use crate::error::Result;
use crate::model::{stamp_features, KfsConfig, KfsModel};
use crate::tensor::{BackwardFault, Tape, Tensor};
use crate::train::{combined_loss_var, stack_targets, Forecaster};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.threshold)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub alpha: f64,
    pub loss_topk: usize,
    pub step: f64,
    pub threshold: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            alpha: 0.3,
            loss_topk: 4,
            step: 1e-5,
            threshold: 1e-4,
            fault: None,
        }
    }
}

fn loss_value<M: Forecaster + ?Sized>(model: &M, windows: &[&Window], target: &Tensor, opts: &GradcheckOptions) -> Result<f64> {
    let mut tape = Tape::new();
    let pred = model.forward_windows(&mut tape, windows)?;
    let loss = combined_loss_var(&mut tape, pred, target, opts.alpha, opts.loss_topk)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares every gradient entry of every parameter against a central
/// difference of the combined loss. One report line per parameter tensor.
pub fn gradcheck<M: Forecaster + Clone>(model: &M, windows: &[Window], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let refs: Vec<&Window> = windows.iter().collect();
    let target = stack_targets(&refs)?;
    let mut tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let pred = model.forward_windows(&mut tape, &refs)?;
    let loss = combined_loss_var(&mut tape, pred, &target, opts.alpha, opts.loss_topk)?;
    let grads = tape.backward(loss)?;

    let mut probe = model.clone();
    let mut groups = Vec::new();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_default();
        let n = model.params().get(id).numel();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = model.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = loss_value(&probe, &refs, &target, opts)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = loss_value(&probe, &refs, &target, opts)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        groups.push(GroupCheck {
            name: model.params().name(id).to_string(),
            entries: n,
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport {
        threshold: opts.threshold,
        groups,
    })
}

/// The small configuration used for gradient verification.
pub fn tiny_config() -> KfsConfig {
    KfsConfig {
        lookback: 16,
        horizon: 8,
        channels: 2,
        d_model: 8,
        d_ff: 16,
        p_dim: 2,
        scales: 1,
        pool_window: 2,
        groups: 2,
        ..KfsConfig::default()
    }
}

/// A model whose rational coefficients and adaptive tokens are moved away
/// from their initial values, plus a few random windows.
pub fn fixture(cfg: KfsConfig, seed: u64, batch: usize) -> Result<(KfsModel, Vec<Window>)> {
    let mut model = KfsModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = model.store().name(id).to_string();
        let jitter = if name.ends_with(".numer") || name.ends_with(".denom") {
            0.1
        } else if name.ends_with(".token") || name.ends_with(".bias") {
            0.3
        } else {
            0.0
        };
        if jitter > 0.0 {
            for v in model.store_mut().get_mut(id).data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += jitter * z;
            }
        }
    }
    let start = NaiveDate::from_ymd_opt(2021, 3, 14)
        .and_then(|d| d.and_hms_opt(5, 0, 0))
        .expect("valid date");
    let (l, f, c) = (cfg.lookback, cfg.horizon, cfg.channels);
    let mut windows = Vec::with_capacity(batch);
    for b in 0..batch {
        let ts: Vec<_> = (0..l + f)
            .map(|i| start + TimeDelta::hours((b * 7 + i) as i64))
            .collect();
        let stamps = stamp_features(&ts)?;
        let mut series = |len: usize| -> Result<Tensor> {
            let data = (0..len * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::new(vec![len, c], data)
        };
        windows.push(Window {
            x: series(l)?,
            y: series(f)?,
            stamps_x: stamps.slice_rows(0, l),
            stamps_y: stamps.slice_rows(l, f),
        });
    }
    Ok((model, windows))
}
