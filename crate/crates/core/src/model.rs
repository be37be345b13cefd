//! The multi-scale frequency-selection forecaster.
//!
//! Per window: build an average-pooled pyramid of the lookback series and
//! its calendar features, instance-normalize every scale, denoise each
//! channel, embed it, pass it through a KAN block, mix in the scale's
//! stamp embedding, average the scales, project to the horizon and undo
//! the scale-0 normalization.
//!
//! Batches are laid out with one row per (window, channel) pair, row
//! `b·C + c`. All parameters are shared across channels.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KfsError, Result};
use crate::grkan::{effective_groups, Block, RationalOrder};
use crate::layers::{Affine, AffineInit};
use crate::spectral::{alt_filter, reconstruct_topk, SmoothingKind};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Calendar features per time step.
pub const STAMP_DIM: usize = 5;
/// Lower clamp on instance-normalization standard deviations.
pub const REVIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Topk,
    MovingAverage,
    Gaussian,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfsConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Width of the learnable adaptive token.
    pub p_dim: usize,
    /// Number of pooling steps; the model has `scales + 1` scales.
    pub scales: usize,
    pub pool_window: usize,
    pub delta: f64,
    pub groups: usize,
    pub m_num: usize,
    pub m_den: usize,
    pub use_kan: bool,
    pub use_stamp: bool,
    pub use_adaptive: bool,
    pub filter_kind: FilterKind,
    /// Kernel width for the smoothing filters.
    pub filter_width: usize,
}

impl Default for KfsConfig {
    fn default() -> Self {
        KfsConfig {
            lookback: 96,
            horizon: 96,
            channels: 7,
            d_model: 128,
            d_ff: 256,
            p_dim: 16,
            scales: 3,
            pool_window: 2,
            delta: 0.9,
            groups: 8,
            m_num: 5,
            m_den: 4,
            use_kan: true,
            use_stamp: true,
            use_adaptive: true,
            filter_kind: FilterKind::Topk,
            filter_width: 5,
        }
    }
}

impl KfsConfig {
    pub fn order(&self) -> RationalOrder {
        RationalOrder {
            numer: self.m_num,
            denom: self.m_den,
        }
    }

    /// Lookback length at each scale.
    pub fn scale_lengths(&self) -> Vec<usize> {
        (0..=self.scales)
            .map(|i| self.lookback / self.pool_window.pow(i as u32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(KfsError::Config(m));
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return cfg("lookback, horizon and channels must be positive".into());
        }
        if self.pool_window < 1 || (self.scales > 0 && self.pool_window < 2) {
            return cfg(format!("pool_window {} must be at least 2", self.pool_window));
        }
        let factor = self
            .pool_window
            .checked_pow(self.scales as u32)
            .ok_or_else(|| KfsError::Config("pyramid too deep".into()))?;
        if !self.lookback.is_multiple_of(factor) {
            return cfg(format!(
                "lookback {} is not divisible by pool_window^scales = {factor}",
                self.lookback
            ));
        }
        if self.lookback / factor < 2 {
            return cfg(format!("coarsest scale has {} steps, need at least 2", self.lookback / factor));
        }
        if self.d_model <= self.p_dim {
            return cfg(format!("d_model {} must exceed p_dim {}", self.d_model, self.p_dim));
        }
        if self.d_ff == 0 {
            return cfg("d_ff must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return cfg(format!("delta {} outside (0, 1]", self.delta));
        }
        if self.m_num < 1 {
            return cfg("m_num must be at least 1".into());
        }
        if self.filter_width.is_multiple_of(2) {
            return cfg(format!("filter_width {} must be odd", self.filter_width));
        }
        if self.use_kan {
            for width in [self.d_model, self.d_ff, 2 * self.d_model] {
                effective_groups(self.groups, width)?;
            }
        }
        Ok(())
    }
}

/// Non-overlapping average pooling along the rows, `n` times.
pub fn downsample_pyramid(x: &Tensor, window: usize, n: usize) -> Result<Vec<Tensor>> {
    let (len, cols) = x.as_matrix_dims();
    let factor = window
        .checked_pow(n as u32)
        .ok_or_else(|| KfsError::Config("pyramid too deep".into()))?;
    if window == 0 || len % factor != 0 {
        return Err(KfsError::Config(format!(
            "length {len} is not divisible by {window}^{n}"
        )));
    }
    let mut levels = vec![x.clone()];
    for _ in 0..n {
        let prev = levels.last().expect("non-empty");
        let out_len = prev.rows() / window;
        let mut data = vec![0.0; out_len * cols];
        for t in 0..out_len {
            for k in 0..window {
                for (d, v) in data[t * cols..(t + 1) * cols].iter_mut().zip(prev.row(t * window + k)) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= window as f64);
        levels.push(Tensor::new(vec![out_len, cols], data)?);
    }
    Ok(levels)
}

/// Per-channel statistics captured by [`revin_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel zero mean and unit population variance over the rows.
pub fn revin_normalize(x: &Tensor) -> Result<(Tensor, RevinState)> {
    let (len, cols) = x.as_matrix_dims();
    if len < 2 {
        return Err(KfsError::invalid("revin_normalize", format!("need at least 2 steps, got {len}")));
    }
    let n = len as f64;
    let mut mean = vec![0.0; cols];
    for t in 0..len {
        for (m, v) in mean.iter_mut().zip(x.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for t in 0..len {
        for ((s, v), m) in var.iter_mut().zip(x.row(t)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(REVIN_EPS)).collect();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % cols;
        *v = (*v - mean[c]) / std[c];
    }
    Ok((out, RevinState { mean, std }))
}

pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    let cols = y.cols();
    if cols != state.mean.len() {
        return Err(KfsError::shape("revin_denormalize", y.shape(), &[state.mean.len()]));
    }
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % cols;
        *v = *v * state.std[c] + state.mean[c];
    }
    Ok(out)
}

/// `[month/12, day/31, weekday/7, hour/24, minute/60] − 0.5` per step,
/// weekday counted from Monday = 0.
pub fn stamp_features(timestamps: &[NaiveDateTime]) -> Result<Tensor> {
    if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(KfsError::Data(format!(
            "timestamps are not strictly increasing at index {}",
            i + 1
        )));
    }
    let mut data = Vec::with_capacity(timestamps.len() * STAMP_DIM);
    for ts in timestamps {
        data.extend_from_slice(&[
            ts.month() as f64 / 12.0 - 0.5,
            ts.day() as f64 / 31.0 - 0.5,
            ts.weekday().num_days_from_monday() as f64 / 7.0 - 0.5,
            ts.hour() as f64 / 24.0 - 0.5,
            ts.minute() as f64 / 60.0 - 0.5,
        ]);
    }
    Tensor::new(vec![timestamps.len(), STAMP_DIM], data)
}

/// Average-pools a stamp matrix with the same windows as the series.
pub fn stamp_pyramid(stamps: &Tensor, window: usize, n: usize) -> Result<Vec<Tensor>> {
    downsample_pyramid(stamps, window, n)
}

/// Parameters owned by one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub length: usize,
    pub embed: Affine,
    /// Adaptive token `[1 × p_dim]`, absent when disabled or `p_dim = 0`.
    pub token: Option<ParamId>,
    pub frek: Block,
    pub stamp: Option<Affine>,
    pub mix: Block,
}

/// Model inputs after pooling, normalization and filtering.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub batch: usize,
    pub channels: usize,
    /// Per scale, `[B·C × L_i]`.
    pub series: Vec<Tensor>,
    /// Per scale, `[B × STAMP_DIM·L_i]` flattened stamp rows.
    pub stamps: Vec<Tensor>,
    /// Scale-0 statistics, one per window.
    pub revin: Vec<RevinState>,
}

#[derive(Clone, Debug)]
pub struct KfsModel {
    cfg: KfsConfig,
    store: ParamStore,
    scales: Vec<ScaleParams>,
    head: Affine,
}

impl KfsModel {
    /// Xavier-initialized affines, identity-initialized rationals.
    pub fn new(cfg: KfsConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, AffineInit::Xavier, seed)
    }

    /// Every affine set to a rectangular identity with zero bias.
    pub fn identity(cfg: KfsConfig) -> Result<Self> {
        Self::build(cfg, AffineInit::Identity, 0)
    }

    fn build(cfg: KfsConfig, init: AffineInit, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, dp) = (cfg.d_model, cfg.d_model - cfg.p_dim);
        let mut scales = Vec::with_capacity(cfg.scales + 1);
        for (i, &length) in cfg.scale_lengths().iter().enumerate() {
            let p = format!("scale{i}");
            let embed = Affine::new(&mut store, &format!("{p}.embed"), length, dp, init, &mut rng)?;
            let token = if cfg.use_adaptive && cfg.p_dim > 0 {
                Some(store.register(format!("{p}.adaptive.token"), Tensor::zeros(&[1, cfg.p_dim]))?)
            } else {
                None
            };
            let frek = Block::new(
                &mut store,
                &format!("{p}.frek"),
                cfg.use_kan,
                d,
                cfg.d_ff,
                d,
                cfg.groups,
                cfg.order(),
                init,
                &mut rng,
            )?;
            let stamp = if cfg.use_stamp {
                Some(Affine::new(&mut store, &format!("{p}.stamp"), STAMP_DIM * length, d, init, &mut rng)?)
            } else {
                None
            };
            let mix = Block::new(
                &mut store,
                &format!("{p}.mix"),
                cfg.use_kan,
                2 * d,
                cfg.d_ff,
                d,
                cfg.groups,
                cfg.order(),
                init,
                &mut rng,
            )?;
            scales.push(ScaleParams {
                length,
                embed,
                token,
                frek,
                stamp,
                mix,
            });
        }
        let head = Affine::new(&mut store, "head", d, cfg.horizon, init, &mut rng)?;
        Ok(KfsModel {
            cfg,
            store,
            scales,
            head,
        })
    }

    pub fn config(&self) -> &KfsConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn scale_params(&self) -> &[ScaleParams] {
        &self.scales
    }

    pub fn head(&self) -> &Affine {
        &self.head
    }

    /// Denoises one normalized channel according to the configured filter.
    pub fn filter_channel(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.cfg.filter_kind {
            FilterKind::None => Ok(x.to_vec()),
            FilterKind::Topk => reconstruct_topk(x, self.cfg.delta).map(|(y, _)| y),
            FilterKind::MovingAverage => alt_filter(x, SmoothingKind::MovingAverage, self.clamped_width(x.len())),
            FilterKind::Gaussian => alt_filter(x, SmoothingKind::Gaussian, self.clamped_width(x.len())),
        }
    }

    /// The configured kernel width, reduced to the largest odd width that
    /// fits a series of length `len`.
    fn clamped_width(&self, len: usize) -> usize {
        let w = self.cfg.filter_width.min(len);
        if w.is_multiple_of(2) {
            w - 1
        } else {
            w
        }
    }

    /// Pools, normalizes and filters a batch of `[L × C]` windows with
    /// their `[L × STAMP_DIM]` lookback stamps.
    pub fn prepare(&self, xs: &[&Tensor], stamps: &[&Tensor]) -> Result<PreparedBatch> {
        let cfg = &self.cfg;
        let (l, c) = (cfg.lookback, cfg.channels);
        if xs.is_empty() || xs.len() != stamps.len() {
            return Err(KfsError::invalid(
                "prepare",
                format!("{} windows with {} stamp blocks", xs.len(), stamps.len()),
            ));
        }
        let b = xs.len();
        let lengths = cfg.scale_lengths();
        let mut series: Vec<Vec<f64>> = lengths.iter().map(|&li| Vec::with_capacity(b * c * li)).collect();
        let mut stamp_rows: Vec<Vec<f64>> = lengths.iter().map(|&li| Vec::with_capacity(b * STAMP_DIM * li)).collect();
        let mut revin = Vec::with_capacity(b);
        for (x, s) in xs.iter().zip(stamps) {
            if x.shape() != [l, c] {
                return Err(KfsError::shape("prepare", x.shape(), &[l, c]));
            }
            if s.shape() != [l, STAMP_DIM] {
                return Err(KfsError::shape("prepare", s.shape(), &[l, STAMP_DIM]));
            }
            let pyramid = downsample_pyramid(x, cfg.pool_window, cfg.scales)?;
            for (i, level) in pyramid.iter().enumerate() {
                let (norm, state) = revin_normalize(level).map_err(|e| e.at_scale(i))?;
                for ch in 0..c {
                    let filtered = self.filter_channel(&norm.column(ch)).map_err(|e| e.at_scale(i))?;
                    series[i].extend_from_slice(&filtered);
                }
                if i == 0 {
                    revin.push(state);
                }
            }
            for (i, level) in stamp_pyramid(s, cfg.pool_window, cfg.scales)?.iter().enumerate() {
                stamp_rows[i].extend_from_slice(level.data());
            }
        }
        let series = series
            .into_iter()
            .zip(&lengths)
            .map(|(d, &li)| Tensor::new(vec![b * c, li], d))
            .collect::<Result<_>>()?;
        let stamps = stamp_rows
            .into_iter()
            .zip(&lengths)
            .map(|(d, &li)| Tensor::new(vec![b, STAMP_DIM * li], d))
            .collect::<Result<_>>()?;
        Ok(PreparedBatch {
            batch: b,
            channels: c,
            series,
            stamps,
            revin,
        })
    }

    /// `[P, affine(x)]` per row of `rows: [R × L_i]`, giving `[R × d_model]`.
    pub fn adaptive_embed(&self, tape: &mut Tape, scale: usize, rows: Var) -> Result<Var> {
        let sp = self.scale(scale)?;
        let width = *tape.shape(rows).last().unwrap_or(&0);
        if width != sp.length {
            return Err(KfsError::Config(format!(
                "embed at scale {scale} expects width {}, got {width}",
                sp.length
            ))
            .at_scale(scale));
        }
        let n = tape.value(rows).rows();
        let e = sp.embed.forward(tape, &self.store, rows)?;
        if self.cfg.p_dim == 0 {
            return Ok(e);
        }
        let token = match sp.token {
            Some(id) => {
                let p = tape.param(&self.store, id);
                tape.gather_rows(p, &vec![0; n])?
            }
            None => tape.constant(Tensor::zeros(&[n, self.cfg.p_dim])),
        };
        tape.concat(&[token, e], 1)
    }

    /// Embedding and KAN block over already-filtered rows `[R × L_i]`.
    pub fn frek_rows(&self, tape: &mut Tape, scale: usize, rows: Var) -> Result<Var> {
        let ae = self.adaptive_embed(tape, scale, rows)?;
        self.scale(scale)?.frek.forward(tape, &self.store, ae)
    }

    /// Filters each channel of a normalized `[L_i × C]` series, embeds it
    /// and applies the KAN block, giving `[C × d_model]`.
    pub fn frek_forward(&self, tape: &mut Tape, scale: usize, x: &Tensor) -> Result<Var> {
        let (len, c) = x.as_matrix_dims();
        let mut data = Vec::with_capacity(len * c);
        for ch in 0..c {
            data.extend(self.filter_channel(&x.column(ch))?);
        }
        let rows = tape.constant(Tensor::new(vec![c, len], data)?);
        self.frek_rows(tape, scale, rows)
    }

    /// Stamp embedding per window, repeated for each of `channels` rows.
    pub fn stamp_embed(&self, tape: &mut Tape, scale: usize, flat: &Tensor, channels: usize) -> Result<Var> {
        let sp = self.scale(scale)?;
        let b = flat.rows();
        match &sp.stamp {
            Some(affine) => {
                let s = tape.constant(flat.clone());
                let e = affine.forward(tape, &self.store, s)?;
                let idx: Vec<usize> = (0..b * channels).map(|r| r / channels).collect();
                tape.gather_rows(e, &idx)
            }
            None => Ok(tape.constant(Tensor::zeros(&[b * channels, self.cfg.d_model]))),
        }
    }

    /// `E₁ + mix([E₁, E_s])`. `es` may have one row, broadcast to all rows
    /// of `e1`.
    pub fn feature_mix(&self, tape: &mut Tape, scale: usize, e1: Var, es: Var) -> Result<Var> {
        let (r1, rs) = (tape.value(e1).rows(), tape.value(es).rows());
        let es = if rs == 1 && r1 != 1 {
            tape.gather_rows(es, &vec![0; r1])?
        } else {
            es
        };
        let cat = tape.concat(&[e1, es], 1)?;
        let m = self.scale(scale)?.mix.forward(tape, &self.store, cat)?;
        tape.add(e1, m)
    }

    /// Normalized-space output `[B·C × F]` before denormalization.
    pub fn forward_normalized(&self, tape: &mut Tape, batch: &PreparedBatch) -> Result<Var> {
        let mut mixed = Vec::with_capacity(self.scales.len());
        for (i, (series, stamps)) in batch.series.iter().zip(&batch.stamps).enumerate() {
            let fm = (|| {
                let rows = tape.constant(series.clone());
                let e1 = self.frek_rows(tape, i, rows)?;
                let es = self.stamp_embed(tape, i, stamps, batch.channels)?;
                self.feature_mix(tape, i, e1, es)
            })()
            .map_err(|e: KfsError| match e {
                KfsError::AtScale { .. } => e,
                other => other.at_scale(i),
            })?;
            mixed.push(fm);
        }
        let avg = tape.mean_of(&mixed)?;
        self.head.forward(tape, &self.store, avg)
    }

    /// Forecast `[F × B·C]`, column `b·C + c` for channel `c` of window `b`.
    pub fn forward_prepared(&self, tape: &mut Tape, batch: &PreparedBatch) -> Result<Var> {
        let out = self.forward_normalized(tape, batch)?;
        let (f, c) = (self.cfg.horizon, batch.channels);
        let mut scale = Vec::with_capacity(batch.batch * c * f);
        let mut shift = Vec::with_capacity(batch.batch * c * f);
        for state in &batch.revin {
            for ch in 0..c {
                scale.extend(std::iter::repeat_n(state.std[ch], f));
                shift.extend(std::iter::repeat_n(state.mean[ch], f));
            }
        }
        let shape = vec![batch.batch * c, f];
        let scale = tape.constant(Tensor::new(shape.clone(), scale)?);
        let shift = tape.constant(Tensor::new(shape, shift)?);
        let y = tape.mul(out, scale)?;
        let y = tape.add(y, shift)?;
        tape.transpose(y)
    }

    pub fn forward_batch(&self, tape: &mut Tape, xs: &[&Tensor], stamps: &[&Tensor]) -> Result<Var> {
        let batch = self.prepare(xs, stamps)?;
        self.forward_prepared(tape, &batch)
    }

    /// Forecast `[F × C]` for one `[L × C]` window.
    pub fn forward(&self, x: &Tensor, stamps: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward_batch(&mut tape, &[x], &[stamps])?;
        Ok(tape.value(y).clone())
    }

    fn scale(&self, i: usize) -> Result<&ScaleParams> {
        self.scales
            .get(i)
            .ok_or_else(|| KfsError::invalid("model", format!("scale {i} out of range")))
    }

    /// Rebuilds the model for `cfg` and loads named parameter values.
    pub fn from_parts(cfg: KfsConfig, params: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::build(cfg, AffineInit::Zeros, 0)?;
        if params.len() != model.store.len() {
            return Err(KfsError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| KfsError::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(KfsError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::Rng;

    fn dt(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, min, 0).unwrap()
    }

    fn hourly_stamps(start: NaiveDateTime, n: usize) -> Tensor {
        let ts: Vec<_> = (0..n).map(|i| start + chrono::TimeDelta::hours(i as i64)).collect();
        stamp_features(&ts).unwrap()
    }

    fn tiny() -> KfsConfig {
        KfsConfig {
            lookback: 16,
            horizon: 8,
            channels: 2,
            d_model: 8,
            d_ff: 16,
            p_dim: 2,
            scales: 1,
            pool_window: 2,
            delta: 0.9,
            groups: 2,
            ..KfsConfig::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn pyramid_examples() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = downsample_pyramid(&x, 2, 1).unwrap();
        assert_eq!(p[1].data(), &[1.5, 3.5]);
        let alt = Tensor::new(vec![8, 1], (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert!(downsample_pyramid(&alt, 2, 2).unwrap()[1].data().iter().all(|&v| v == 0.0));
        let c = Tensor::filled(&[16, 3], 4.2);
        for level in downsample_pyramid(&c, 2, 3).unwrap() {
            assert!(level.data().iter().all(|&v| (v - 4.2).abs() < 1e-15));
        }
        assert!(matches!(downsample_pyramid(&c, 3, 1), Err(KfsError::Config(_))));
    }

    #[test]
    fn revin_examples() {
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let (n, s) = revin_normalize(&x).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0]);
        assert_eq!(s.std, vec![1.0]);
        let (z, s) = revin_normalize(&Tensor::filled(&[5, 1], 3.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.std, vec![REVIN_EPS]);
        let r = random(30, 4, 1);
        let (n, s) = revin_normalize(&r).unwrap();
        assert!(revin_denormalize(&n, &s).unwrap().max_abs_diff(&r) < 1e-9);
    }

    #[test]
    fn stamp_examples() {
        // 2018-01-01 was a Monday.
        let s = stamp_features(&[dt(2018, 1, 1, 0, 0)]).unwrap();
        let expect = [1.0 / 12.0 - 0.5, 1.0 / 31.0 - 0.5, -0.5, -0.5, -0.5];
        for (a, b) in s.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let h = hourly_stamps(dt(2019, 12, 31, 20, 0), 100);
        assert!((0..100).all(|t| h.at(t, 4) == -0.5));
        assert!(h.data().iter().all(|v| (-0.5..=0.5).contains(v)));
        assert!(stamp_features(&[dt(2018, 1, 1, 1, 0), dt(2018, 1, 1, 0, 0)]).is_err());
    }

    #[test]
    fn stamp_pyramid_matches_series_pyramid() {
        let s = hourly_stamps(dt(2020, 3, 1, 0, 0), 16);
        let sp = stamp_pyramid(&s, 2, 3).unwrap();
        let xp = downsample_pyramid(&random(16, 2, 3), 2, 3).unwrap();
        assert_eq!(sp.iter().map(Tensor::rows).collect::<Vec<_>>(), xp.iter().map(Tensor::rows).collect::<Vec<_>>());
        for c in 0..STAMP_DIM {
            assert!((sp[1].at(0, c) - (s.at(0, c) + s.at(1, c)) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(KfsConfig::default().validate().is_ok());
        let bad = [
            KfsConfig { lookback: 15, ..tiny() },
            KfsConfig { p_dim: 8, ..tiny() },
            KfsConfig { delta: 0.0, ..tiny() },
            KfsConfig { delta: 1.5, ..tiny() },
            KfsConfig { groups: 3, ..tiny() },
            KfsConfig { scales: 4, ..tiny() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(KfsError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn param_names_and_ablations() {
        let m = KfsModel::new(tiny(), 0).unwrap();
        let names: Vec<&str> = m.store().iter().map(|(_, n, _)| n).collect();
        for expect in [
            "scale0.embed.weight",
            "scale1.adaptive.token",
            "scale0.frek.unit1.numer",
            "scale1.stamp.weight",
            "scale0.mix.unit2.denom",
            "head.bias",
        ] {
            assert!(names.contains(&expect), "{expect}");
        }
        let m2 = KfsModel::new(
            KfsConfig {
                use_stamp: false,
                use_adaptive: false,
                use_kan: false,
                ..tiny()
            },
            0,
        )
        .unwrap();
        let names: Vec<&str> = m2.store().iter().map(|(_, n, _)| n).collect();
        assert!(!names.iter().any(|n| n.contains("stamp") || n.contains("adaptive") || n.contains("numer")));
        assert!(names.contains(&"scale0.mix.fc1.weight"));
    }

    #[test]
    fn output_shape_grid() {
        for (l, f, c, n, d) in [(16, 8, 2, 1, 2), (24, 5, 3, 1, 3), (32, 16, 1, 3, 2), (12, 4, 2, 0, 2)] {
            for kind in [FilterKind::Topk, FilterKind::MovingAverage, FilterKind::Gaussian, FilterKind::None] {
                for use_kan in [true, false] {
                    let cfg = KfsConfig {
                        lookback: l,
                        horizon: f,
                        channels: c,
                        scales: n,
                        pool_window: d,
                        filter_kind: kind,
                        use_kan,
                        ..tiny()
                    };
                    let m = KfsModel::new(cfg, 5).unwrap();
                    let y = m.forward(&random(l, c, 9), &hourly_stamps(dt(2021, 5, 5, 0, 0), l)).unwrap();
                    assert_eq!(y.shape(), &[f, c]);
                    assert!(y.all_finite());
                }
            }
        }
    }

    #[test]
    fn adaptive_embed_examples() {
        let cfg = KfsConfig { p_dim: 0, ..tiny() };
        let m = KfsModel::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = random(3, 16, 4);
        let rows = tape.constant(x.clone());
        let e = m.adaptive_embed(&mut tape, 0, rows).unwrap();
        let sp = &m.scale_params()[0];
        let w = m.store().get(sp.embed.weight);
        for r in 0..3 {
            for j in 0..8 {
                let direct: f64 = (0..16).map(|k| x.at(r, k) * w.at(k, j)).sum();
                assert!((tape.value(e).at(r, j) - direct).abs() < 1e-12);
            }
        }

        let mut m = KfsModel::new(tiny(), 1).unwrap();
        let token = m.scale_params()[0].token.unwrap();
        *m.store_mut().get_mut(token) = Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 16];
        data[16..].copy_from_slice(&[0.0; 16]);
        let rows = tape.constant(Tensor::new(vec![2, 16], data).unwrap());
        let e = m.adaptive_embed(&mut tape, 0, rows).unwrap();
        for r in 0..2 {
            assert_eq!(&tape.value(e).row(r)[..2], &[0.7, -0.3]);
            assert!(tape.value(e).row(r)[2..].iter().all(|&v| v == 0.0));
        }
        let bad = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(m.adaptive_embed(&mut tape, 0, bad).is_err());
    }

    #[test]
    fn frek_identity_composition() {
        let cfg = KfsConfig {
            filter_kind: FilterKind::None,
            ..tiny()
        };
        let m = KfsModel::identity(cfg).unwrap();
        let x = random(16, 2, 7);
        let mut tape = Tape::new();
        let e1 = m.frek_forward(&mut tape, 0, &x).unwrap();
        let xt = x.transpose();
        let rows = tape.constant(xt);
        let ae = m.adaptive_embed(&mut tape, 0, rows).unwrap();
        assert!(tape.value(e1).max_abs_diff(tape.value(ae)) < 1e-12);
    }

    #[test]
    fn full_energy_equals_no_filter() {
        let x = revin_normalize(&random(16, 2, 8)).unwrap().0;
        let e = |kind, delta| {
            let m = KfsModel::new(KfsConfig { filter_kind: kind, delta, ..tiny() }, 3).unwrap();
            let mut tape = Tape::new();
            let v = m.frek_forward(&mut tape, 0, &x).unwrap();
            tape.value(v).clone()
        };
        assert!(e(FilterKind::Topk, 1.0).max_abs_diff(&e(FilterKind::None, 1.0)) < 1e-9);
    }

    #[test]
    fn single_tone_passes_selection() {
        let tone: Vec<f64> = (0..16).map(|t| (2.0 * std::f64::consts::PI * 3.0 * t as f64 / 16.0).cos()).collect();
        let x = Tensor::new(vec![16, 1], tone).unwrap();
        let cfg = |kind| KfsConfig {
            filter_kind: kind,
            delta: 0.5,
            channels: 1,
            ..tiny()
        };
        let run = |kind| {
            let m = KfsModel::new(cfg(kind), 2).unwrap();
            let mut tape = Tape::new();
            let v = m.frek_forward(&mut tape, 0, &x).unwrap();
            tape.value(v).clone()
        };
        assert!(run(FilterKind::Topk).max_abs_diff(&run(FilterKind::None)) < 1e-9);
    }

    #[test]
    fn feature_mix_zero_head_is_residual() {
        let mut m = KfsModel::new(tiny(), 4).unwrap();
        let crate::grkan::Block::Kan(mix) = m.scale_params()[0].mix.clone() else {
            panic!("expected kan")
        };
        *m.store_mut().get_mut(mix.unit2.linear.weight) = Tensor::zeros(&[16, 8]);
        let mut tape = Tape::new();
        let e1 = tape.constant(random(2, 8, 1));
        let es = tape.constant(random(1, 8, 2));
        let fm = m.feature_mix(&mut tape, 0, e1, es).unwrap();
        assert!(tape.value(fm).max_abs_diff(tape.value(e1)) < 1e-15);
    }

    #[test]
    fn stamp_toggle_agrees_with_zero_stamps() {
        let on = KfsModel::new(tiny(), 6).unwrap();
        let mut off = KfsModel::new(KfsConfig { use_stamp: false, ..tiny() }, 6).unwrap();
        for (_, name, value) in on.store().iter() {
            if let Some(id) = off.store().find(name) {
                *off.store_mut().get_mut(id) = value.clone();
            }
        }
        let x = random(16, 2, 3);
        let zeros = Tensor::zeros(&[16, STAMP_DIM]);
        let a = on.forward(&x, &zeros).unwrap();
        let b = off.forward(&x, &hourly_stamps(dt(2020, 1, 1, 0, 0), 16)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn constant_series_identity_model() {
        let m = KfsModel::identity(tiny()).unwrap();
        let x = Tensor::new(vec![16, 2], (0..32).map(|i| if i % 2 == 0 { 3.5 } else { -1.25 }).collect()).unwrap();
        let y = m.forward(&x, &hourly_stamps(dt(2020, 6, 1, 0, 0), 16)).unwrap();
        for t in 0..8 {
            assert!((y.at(t, 0) - 3.5).abs() < 1e-6 && (y.at(t, 1) + 1.25).abs() < 1e-6);
        }
    }

    #[test]
    fn single_scale_matches_manual_pipeline() {
        let cfg = KfsConfig { scales: 0, ..tiny() };
        let m = KfsModel::new(cfg, 12).unwrap();
        let x = random(16, 2, 5);
        let s = hourly_stamps(dt(2020, 2, 1, 0, 0), 16);
        let y = m.forward(&x, &s).unwrap();

        let (norm, state) = revin_normalize(&x).unwrap();
        let mut tape = Tape::new();
        let e1 = m.frek_forward(&mut tape, 0, &norm).unwrap();
        let flat = s.reshape(&[1, 16 * STAMP_DIM]).unwrap();
        let es = m.stamp_embed(&mut tape, 0, &flat, 1).unwrap();
        let fm = m.feature_mix(&mut tape, 0, e1, es).unwrap();
        let out = m.head().forward(&mut tape, m.store(), fm).unwrap();
        let manual = revin_denormalize(&tape.value(out).transpose(), &state).unwrap();
        assert!(y.max_abs_diff(&manual) < 1e-12);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let cfg = KfsConfig { channels: 3, ..tiny() };
        let m = KfsModel::new(cfg, 8).unwrap();
        let x = random(16, 3, 10);
        let perm = [2, 0, 1];
        let mut xp = Tensor::zeros(&[16, 3]);
        for t in 0..16 {
            for (j, &p) in perm.iter().enumerate() {
                xp.data_mut()[t * 3 + j] = x.at(t, p);
            }
        }
        let s = hourly_stamps(dt(2020, 2, 1, 0, 0), 16);
        let (y, yp) = (m.forward(&x, &s).unwrap(), m.forward(&xp, &s).unwrap());
        for t in 0..8 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((yp.at(t, j) - y.at(t, p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positive_scaling_leaves_embedding_unchanged() {
        let m = KfsModel::new(tiny(), 8).unwrap();
        let x = random(16, 2, 11);
        let scaled = x.map(|v| 7.5 * v);
        let s = hourly_stamps(dt(2020, 2, 1, 0, 0), 16);
        let a = m.prepare(&[&x], &[&s]).unwrap();
        let b = m.prepare(&[&scaled], &[&s]).unwrap();
        for (p, q) in a.series.iter().zip(&b.series) {
            assert!(p.max_abs_diff(q) < 1e-12);
        }
    }

    #[test]
    fn batch_columns_match_single_windows() {
        let m = KfsModel::new(tiny(), 2).unwrap();
        let xs = [random(16, 2, 1), random(16, 2, 2)];
        let s = hourly_stamps(dt(2020, 2, 1, 0, 0), 16);
        let mut tape = Tape::new();
        let y = m.forward_batch(&mut tape, &[&xs[0], &xs[1]], &[&s, &s]).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[8, 4]);
        for (b, x) in xs.iter().enumerate() {
            let single = m.forward(x, &s).unwrap();
            for t in 0..8 {
                for c in 0..2 {
                    assert!((y.at(t, b * 2 + c) - single.at(t, c)).abs() < 1e-12);
                }
            }
        }
    }
}
