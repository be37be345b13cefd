//! Losses, metrics, Adam and the early-stopping training loop.
//!
//! Forecasts and targets use the `[F × S]` layout: one column per
//! (window, channel) series.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SplitKind, Window, WindowedDataset};
use crate::error::{KfsError, Result};
use crate::layers::{Affine, AffineInit};
use crate::model::KfsModel;
use crate::spectral::rdft;
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(KfsError::shape(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(KfsError::invalid(op, "empty input"));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mae", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

fn check_topk(horizon: usize, k: usize) -> Result<()> {
    let bins = horizon / 2 + 1;
    if k == 0 || k > bins {
        return Err(KfsError::Config(format!(
            "loss_topk {k} outside 1..={bins} for horizon {horizon}"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest-modulus bins of `series`, ties to the lower
/// index.
pub fn dominant_bins(series: &[f64], k: usize) -> Result<Vec<usize>> {
    let spec = rdft(series)?;
    let amp: Vec<f64> = spec.coeffs().iter().map(|z| z.norm()).collect();
    let mut order: Vec<usize> = (0..amp.len()).collect();
    order.sort_by(|&a, &b| amp[b].total_cmp(&amp[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Mean over series of `(1/K) Σ |Ŷ[k] − Y[k]|` on the target's `K`
/// dominant bins.
pub fn freq_loss(pred: &Tensor, target: &Tensor, k: usize) -> Result<f64> {
    check_same("freq_loss", pred, target)?;
    let (f, s) = target.as_matrix_dims();
    check_topk(f, k)?;
    let mut total = 0.0;
    for col in 0..s {
        let (p, y) = (pred.column(col), target.column(col));
        let (sp, sy) = (rdft(&p)?, rdft(&y)?);
        let sum: f64 = dominant_bins(&y, k)?
            .iter()
            .map(|&i| (sp.coeffs()[i] - sy.coeffs()[i]).norm())
            .sum();
        total += sum / k as f64;
    }
    Ok(total / s as f64)
}

pub fn combined_loss(pred: &Tensor, target: &Tensor, alpha: f64, k: usize) -> Result<f64> {
    check_alpha(alpha)?;
    let m = mse(pred, target)?;
    if alpha == 0.0 {
        return Ok(m);
    }
    let lf = freq_loss(pred, target, k)?;
    if alpha == 1.0 {
        return Ok(lf);
    }
    Ok(alpha * lf + (1.0 - alpha) * m)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(KfsError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub fn mse_var(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Real and imaginary DFT rows `[bins × F]` for a length-`f` signal.
fn dft_matrices(f: usize) -> (Tensor, Tensor) {
    let bins = f / 2 + 1;
    let mut re = Vec::with_capacity(bins * f);
    let mut im = Vec::with_capacity(bins * f);
    for k in 0..bins {
        let edge = k == 0 || 2 * k == f;
        for t in 0..f {
            let phase = 2.0 * PI * ((k * t) % f) as f64 / f as f64;
            re.push(phase.cos());
            im.push(if edge { 0.0 } else { -phase.sin() });
        }
    }
    (
        Tensor::new(vec![bins, f], re).expect("dft shape"),
        Tensor::new(vec![bins, f], im).expect("dft shape"),
    )
}

/// Differentiable [`freq_loss`]. The selected bins depend on the target
/// only.
pub fn freq_loss_var(tape: &mut Tape, pred: Var, target: &Tensor, k: usize) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(KfsError::shape("freq_loss", tape.shape(pred), target.shape()));
    }
    let (f, s) = target.as_matrix_dims();
    check_topk(f, k)?;
    let bins = f / 2 + 1;
    let mut mask = vec![0.0; bins * s];
    let weight = 1.0 / (k * s) as f64;
    for col in 0..s {
        for i in dominant_bins(&target.column(col), k)? {
            mask[i * s + col] = weight;
        }
    }
    let (re, im) = dft_matrices(f);
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let re = tape.constant(re);
    let im = tape.constant(im);
    let dre = tape.matmul(re, diff)?;
    let dim = tape.matmul(im, diff)?;
    let modulus = tape.hypot(dre, dim)?;
    let mask = tape.constant(Tensor::new(vec![bins, s], mask)?);
    let weighted = tape.mul(modulus, mask)?;
    Ok(tape.sum(weighted))
}

/// `α·L_F + (1−α)·MSE`; the unused term is skipped at the endpoints.
pub fn combined_loss_var(tape: &mut Tape, pred: Var, target: &Tensor, alpha: f64, k: usize) -> Result<Var> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return mse_var(tape, pred, target);
    }
    let lf = freq_loss_var(tape, pred, target, k)?;
    if alpha == 1.0 {
        return Ok(lf);
    }
    let m = mse_var(tape, pred, target)?;
    let a = tape.mul_scalar(lf, alpha);
    let b = tape.mul_scalar(m, 1.0 - alpha);
    tape.add(a, b)
}

/// Anything that maps lookback windows to `[F × B·C]` forecasts.
pub trait Forecaster {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward_windows(&self, tape: &mut Tape, windows: &[&Window]) -> Result<Var>;
}

impl Forecaster for KfsModel {
    fn params(&self) -> &ParamStore {
        self.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }

    fn forward_windows(&self, tape: &mut Tape, windows: &[&Window]) -> Result<Var> {
        let xs: Vec<&Tensor> = windows.iter().map(|w| &w.x).collect();
        let stamps: Vec<&Tensor> = windows.iter().map(|w| &w.stamps_x).collect();
        self.forward_batch(tape, &xs, &stamps)
    }
}

/// Stacks window inputs as rows `[B·C × L]`.
fn input_rows(windows: &[&Window]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| KfsError::invalid("forecast", "empty batch"))?;
    let (l, c) = first.x.as_matrix_dims();
    let mut data = Vec::with_capacity(windows.len() * c * l);
    for w in windows {
        if w.x.shape() != [l, c] {
            return Err(KfsError::shape("forecast", w.x.shape(), &[l, c]));
        }
        for ch in 0..c {
            data.extend(w.x.column(ch));
        }
    }
    Tensor::new(vec![windows.len() * c, l], data)
}

/// Targets `[F × B·C]` in the forecast layout.
pub fn stack_targets(windows: &[&Window]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| KfsError::invalid("targets", "empty batch"))?;
    let (f, c) = first.y.as_matrix_dims();
    let s = windows.len() * c;
    let mut data = vec![0.0; f * s];
    for (b, w) in windows.iter().enumerate() {
        if w.y.shape() != [f, c] {
            return Err(KfsError::shape("targets", w.y.shape(), &[f, c]));
        }
        for t in 0..f {
            for ch in 0..c {
                data[t * s + b * c + ch] = w.y.at(t, ch);
            }
        }
    }
    Tensor::new(vec![f, s], data)
}

/// A single channel-shared affine map from the lookback to the horizon.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    store: ParamStore,
    affine: Affine,
}

impl LinearBaseline {
    pub fn new(lookback: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let affine = Affine::new(&mut store, "linear", lookback, horizon, AffineInit::Xavier, &mut rng)?;
        Ok(LinearBaseline { store, affine })
    }
}

impl Forecaster for LinearBaseline {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_windows(&self, tape: &mut Tape, windows: &[&Window]) -> Result<Var> {
        let rows = tape.constant(input_rows(windows)?);
        let out = self.affine.forward(tape, &self.store, rows)?;
        tape.transpose(out)
    }
}

/// Repeats the last observed value over the horizon.
#[derive(Clone, Debug)]
pub struct Persistence {
    store: ParamStore,
    horizon: usize,
}

impl Persistence {
    pub fn new(horizon: usize) -> Self {
        Persistence {
            store: ParamStore::new(),
            horizon,
        }
    }
}

impl Forecaster for Persistence {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_windows(&self, tape: &mut Tape, windows: &[&Window]) -> Result<Var> {
        let rows = input_rows(windows)?;
        let (s, l) = rows.as_matrix_dims();
        let mut data = vec![0.0; self.horizon * s];
        for j in 0..s {
            let last = rows.at(j, l - 1);
            for t in 0..self.horizon {
                data[t * s + j] = last;
            }
        }
        Ok(tape.constant(Tensor::new(vec![self.horizon, s], data)?))
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |_| Vec::new();
        let m = (0..store.len()).map(zeros).collect();
        let v = (0..store.len()).map(zeros).collect();
        let mut adam = Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        };
        for (id, _, value) in store.iter() {
            adam.m[id.index()] = vec![0.0; value.numel()];
            adam.v[id.index()] = vec![0.0; value.numel()];
        }
        adam
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Any non-finite gradient aborts before a single
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(KfsError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub loss_topk: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Line-delimited JSON epoch records are appended here when set.
    pub history_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.3,
            loss_topk: 32,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 2024,
            history_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.alpha > 0.0 {
            check_topk(horizon, self.loss_topk)?;
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KfsError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(KfsError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept, 0 when none ran.
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
}

const EVAL_BATCH: usize = 256;

/// Metrics over every window of `split`, in standardized units.
pub fn evaluate<M: Forecaster + ?Sized>(model: &M, ds: &WindowedDataset, split: SplitKind) -> Result<Metrics> {
    let starts = ds.window_starts(split);
    if starts.is_empty() {
        return Err(KfsError::Data(format!("{} split has no windows", split.name())));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in starts.chunks(EVAL_BATCH) {
        let windows: Vec<Window> = chunk.iter().map(|&s| ds.window_at(s)).collect();
        let refs: Vec<&Window> = windows.iter().collect();
        let mut tape = Tape::new();
        let pred = model.forward_windows(&mut tape, &refs)?;
        let target = stack_targets(&refs)?;
        let pred = tape.value(pred);
        check_same("evaluate", pred, &target)?;
        for (p, y) in pred.data().iter().zip(target.data()) {
            se += (p - y) * (p - y);
            ae += (p - y).abs();
        }
        n += target.numel();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// Loss and gradients for one batch.
pub fn batch_gradients<M: Forecaster + ?Sized>(
    model: &M,
    windows: &[&Window],
    alpha: f64,
    k: usize,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let pred = model.forward_windows(&mut tape, windows)?;
    let target = stack_targets(windows)?;
    let loss = combined_loss_var(&mut tape, pred, &target, alpha, k)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Minibatch Adam over shuffled training windows with early stopping on
/// validation MSE. On return the model holds the best epoch's parameters.
pub fn train<M: Forecaster + ?Sized>(model: &mut M, ds: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(ds.horizon)?;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: 0,
        best_val_mse: None,
    };
    if cfg.max_epochs == 0 {
        return Ok(outcome);
    }
    let mut sink = match &cfg.history_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut starts = ds.window_starts(SplitKind::Train);
    if starts.is_empty() {
        return Err(KfsError::Data("train split has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut best = model.params().clone();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let clock = Instant::now();
        starts.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in starts.chunks(cfg.batch_size).enumerate() {
            let windows: Vec<Window> = chunk.iter().map(|&s| ds.window_at(s)).collect();
            let refs: Vec<&Window> = windows.iter().collect();
            let (loss, grads) = batch_gradients(model, &refs, cfg.alpha, cfg.loss_topk)?;
            if !loss.is_finite() {
                return Err(KfsError::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let val = evaluate(model, ds, SplitKind::Val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        if let Some(w) = sink.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| KfsError::Data(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        outcome.history.push(record);
        if outcome.best_val_mse.is_none_or(|b| val.mse < b) {
            outcome.best_val_mse = Some(val.mse);
            outcome.best_epoch = epoch;
            best = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(mut w) = sink {
        w.flush()?;
    }
    model.params_mut().copy_values_from(&best)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_and_scale, synth_series, SplitRatio, SynthSpec, Tone};
    use crate::model::{FilterKind, KfsConfig};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_dft(x: &[f64], k: usize) -> (f64, f64) {
        let n = x.len() as f64;
        x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
            let ph = -2.0 * PI * (k * t) as f64 / n;
            (re + v * ph.cos(), im + v * ph.sin())
        })
    }

    #[test]
    fn metric_examples() {
        let y = random(6, 3, 1);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 2.0);
        assert!((mse(&shifted, &y).unwrap() - 4.0).abs() < 1e-12);
        assert!((mae(&shifted, &y).unwrap() - 2.0).abs() < 1e-12);
        let p = random(6, 3, 2);
        let mut direct = 0.0;
        for r in 0..6 {
            for c in 0..3 {
                direct += (p.at(r, c) - y.at(r, c)).powi(2);
            }
        }
        assert!((mse(&p, &y).unwrap() - direct / 18.0).abs() < 1e-14);
        assert!(mse(&p, &random(3, 6, 1)).is_err());
    }

    #[test]
    fn freq_loss_examples() {
        let y = random(16, 2, 3);
        assert_eq!(freq_loss(&y, &y, 4).unwrap(), 0.0);

        let f = 16;
        let amp = 1.7;
        let tone: Vec<f64> = (0..f).map(|t| amp * (2.0 * PI * t as f64 / f as f64).cos()).collect();
        let target = Tensor::new(vec![f, 1], tone.clone()).unwrap();
        let (re, im) = naive_dft(&tone, 1);
        let l = freq_loss(&Tensor::zeros(&[f, 1]), &target, 1).unwrap();
        assert!((l - re.hypot(im)).abs() < 1e-12);
        assert!((l - amp * f as f64 / 2.0).abs() < 1e-12);
        assert!(freq_loss(&target, &target, 10).is_err());
    }

    #[test]
    fn freq_loss_ignores_unselected_bins() {
        let f = 32;
        let tone: Vec<f64> = (0..f).map(|t| 3.0 * (2.0 * PI * 2.0 * t as f64 / f as f64).sin()).collect();
        let target = Tensor::new(vec![f, 1], tone).unwrap();
        let pred = random(f, 1, 4);
        let bump: Vec<f64> = (0..f).map(|t| 0.8 * (2.0 * PI * 9.0 * t as f64 / f as f64).cos()).collect();
        let moved = Tensor::new(vec![f, 1], pred.data().iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        let a = freq_loss(&pred, &target, 1).unwrap();
        let b = freq_loss(&moved, &target, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_direct() {
        let (p, y) = (random(16, 3, 5), random(16, 3, 6));
        for alpha in [0.0, 0.3, 1.0] {
            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone());
            let l = combined_loss_var(&mut tape, pv, &y, alpha, 4).unwrap();
            let direct = combined_loss(&p, &y, alpha, 4).unwrap();
            assert!((tape.value(l).data()[0] - direct).abs() < 1e-12, "alpha {alpha}");
        }
        let m = mse(&p, &y).unwrap();
        let lf = freq_loss(&p, &y, 4).unwrap();
        assert_eq!(combined_loss(&p, &y, 0.0, 4).unwrap(), m);
        assert_eq!(combined_loss(&p, &y, 1.0, 4).unwrap(), lf);
        assert!((combined_loss(&p, &y, 0.3, 4).unwrap() - (0.3 * lf + 0.7 * m)).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_gradient_matches_differences() {
        let (p, y) = (random(12, 2, 7), random(12, 2, 8));
        for alpha in [0.0, 0.3, 1.0] {
            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone());
            let l = combined_loss_var(&mut tape, pv, &y, alpha, 3).unwrap();
            let g = tape.backward(l).unwrap();
            let g = g.wrt(pv).unwrap();
            let h = 1e-6;
            for (i, &gi) in g.iter().enumerate() {
                let mut plus = p.clone();
                plus.data_mut()[i] += h;
                let mut minus = p.clone();
                minus.data_mut()[i] -= h;
                let fd = (combined_loss(&plus, &y, alpha, 3).unwrap() - combined_loss(&minus, &y, alpha, 3).unwrap())
                    / (2.0 * h);
                let rel = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-8);
                assert!(rel < 1e-6, "alpha {alpha} i {i}: {fd} vs {gi}");
            }
        }
    }

    fn scalar_store(v: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::from_vec(vec![v])).unwrap();
        (s, id)
    }

    fn grad_of(store: &ParamStore, f: impl Fn(&mut Tape, Var) -> Var) -> Gradients {
        let mut tape = Tape::new();
        let p = tape.param(store, store.ids().next().unwrap());
        let l = f(&mut tape, p);
        tape.backward(l).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(1.25);
        let mut adam = Adam::new(&s, 0.1);
        let g = grad_of(&s, |t, p| t.mul_scalar(p, 0.0));
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(id).data(), &[1.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.5);
        let mut adam = Adam::new(&s, 0.01);
        let g = grad_of(&s, |t, p| t.mul_scalar(p, 3.0));
        adam.step(&mut s, &g).unwrap();
        assert!((s.get(id).data()[0] - (0.5 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_solves_quadratic() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, 0.1);
        for _ in 0..100 {
            let g = grad_of(&s, |t, p| {
                let d = t.add_scalar(p, -3.0);
                t.mul(d, d).unwrap()
            });
            adam.step(&mut s, &g).unwrap();
        }
        assert!((s.get(id).data()[0] - 3.0).abs() < 0.1);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, 0.1);
        let g = grad_of(&s, |t, p| t.mul_scalar(p, f64::NAN));
        match adam.step(&mut s, &g) {
            Err(KfsError::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.get(id).data(), &[0.0]);
    }

    fn synth_ds(sigma: f64, tones: Vec<Tone>, len: usize, l: usize, f: usize) -> WindowedDataset {
        let spec = SynthSpec {
            length: len,
            channels: 2,
            tones,
            sigma,
            seed: 3,
            start: chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            step_minutes: 60,
        };
        split_and_scale(&synth_series(&spec).unwrap(), SplitRatio::ETT, l, f).unwrap()
    }

    fn small_cfg() -> KfsConfig {
        KfsConfig {
            lookback: 16,
            horizon: 8,
            channels: 2,
            d_model: 8,
            d_ff: 16,
            p_dim: 2,
            scales: 1,
            groups: 2,
            filter_kind: FilterKind::None,
            ..KfsConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = synth_ds(0.1, vec![], 200, 16, 8);
        let mut m = KfsModel::new(small_cfg(), 1).unwrap();
        let before = m.store().clone();
        let out = train(
            &mut m,
            &ds,
            &TrainConfig {
                max_epochs: 0,
                loss_topk: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(out.history.is_empty());
        for ((_, _, a), (_, _, b)) in m.store().iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn learnable_constant_improves() {
        let tone = Tone {
            bin: 0.0,
            amplitude: 2.0,
            phases: vec![],
        };
        let ds = synth_ds(0.5, vec![tone], 400, 16, 8);
        let mut m = LinearBaseline::new(16, 8, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 5,
            loss_topk: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train(&mut m, &ds, &cfg).unwrap();
        let v: Vec<f64> = out.history.iter().map(|r| r.val_mse).collect();
        assert!(v[1] < v[0] && v[2] < v[1], "{v:?}");
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let tone = Tone {
            bin: 5.0,
            amplitude: 1.0,
            phases: vec![0.0, 1.0],
        };
        let ds = synth_ds(0.2, vec![tone], 300, 16, 8);
        let cfg = TrainConfig {
            max_epochs: 3,
            loss_topk: 4,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = KfsModel::new(small_cfg(), 9).unwrap();
            let out = train(&mut m, &ds, &cfg).unwrap();
            (m, out)
        };
        let (m1, o1) = run();
        let (_, o2) = run();
        let strip = |o: &TrainOutcome| {
            o.history
                .iter()
                .map(|r| (r.train_loss.to_bits(), r.val_mse.to_bits(), r.val_mae.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&o1), strip(&o2));
        let best = o1.best_val_mse.unwrap();
        assert!(o1.history.iter().all(|r| r.val_mse >= best));
        let kept = evaluate(&m1, &ds, SplitKind::Val).unwrap().mse;
        assert!(kept <= best + 1e-12);
    }

    #[test]
    fn persistence_on_constant_series_is_exact() {
        let tone = Tone {
            bin: 0.0,
            amplitude: 4.0,
            phases: vec![],
        };
        let ds = synth_ds(0.0, vec![tone], 120, 16, 8);
        let m = evaluate(&Persistence::new(8), &ds, SplitKind::Test).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mae, 0.0);
    }

    #[test]
    fn evaluate_matches_direct_sum_on_two_windows() {
        // test split of 25 rows with L+F = 24 gives exactly two windows
        let ds = synth_ds(0.3, vec![], 125, 16, 8);
        assert_eq!(ds.window_count(SplitKind::Test), 2);
        let model = LinearBaseline::new(16, 8, 4).unwrap();
        let got = evaluate(&model, &ds, SplitKind::Test).unwrap();
        let w = model.params().iter().next().unwrap().2.clone();
        let (mut se, mut ae) = (0.0, 0.0);
        for s in ds.window_starts(SplitKind::Test) {
            let win = ds.window_at(s);
            for c in 0..2 {
                for t in 0..8 {
                    let pred: f64 = (0..16).map(|k| win.x.at(k, c) * w.at(k, t)).sum();
                    let e = pred - win.y.at(t, c);
                    se += e * e;
                    ae += e.abs();
                }
            }
        }
        assert!((got.mse - se / 32.0).abs() < 1e-12);
        assert!((got.mae - ae / 32.0).abs() < 1e-12);
        assert!(got.mse >= 0.0 && got.mae >= 0.0);
    }
}
