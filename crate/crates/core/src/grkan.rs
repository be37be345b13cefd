//! Group-rational KAN layers.
//!
//! A unit applies a learnable rational function
//! `F(x) = (a₀ + a₁x + … + a_m x^m) / (1 + |b₁x + … + b_n x^n|)`
//! to every input channel, channels in the same group sharing one set of
//! coefficients, and follows it with an affine map. A block chains two
//! units. The denominator is at least one, so `F` has no poles.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KfsError, Result};
use crate::layers::{Affine, AffineInit};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Polynomial orders of the rational activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalOrder {
    pub numer: usize,
    pub denom: usize,
}

impl Default for RationalOrder {
    fn default() -> Self {
        RationalOrder { numer: 5, denom: 4 }
    }
}

/// Evaluates `P(x) / (1 + |Q(x)|)` by Horner's rule. `a` holds `a₀..a_m`,
/// `b` holds `b₁..b_n` and may be empty.
pub fn rational_eval(x: f64, a: &[f64], b: &[f64]) -> f64 {
    let p = a.iter().rev().fold(0.0, |acc, &c| acc * x + c);
    let q = x * b.iter().rev().fold(0.0, |acc, &c| acc * x + c);
    p / (1.0 + q.abs())
}

/// Coefficients for which `F(x) = x`.
pub fn init_rational_identity(m_num: usize, m_den: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m_num < 1 {
        return Err(KfsError::Config("numerator order must be at least 1".into()));
    }
    let mut a = vec![0.0; m_num + 1];
    a[1] = 1.0;
    Ok((a, vec![0.0; m_den]))
}

/// Group count actually used for a `d_in`-wide input: the requested count,
/// or `d_in` when the input is narrower than that.
pub fn effective_groups(requested: usize, d_in: usize) -> Result<usize> {
    let g = requested.min(d_in);
    if g == 0 || !d_in.is_multiple_of(g) {
        return Err(KfsError::Config(format!(
            "input width {d_in} is not divisible into {g} rational groups"
        )));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RationalParams {
    /// `[g × (m_num + 1)]`
    pub numer: ParamId,
    /// `[g × m_den]`
    pub denom: ParamId,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrKanLayer {
    pub rational: RationalParams,
    pub linear: Affine,
}

impl GrKanLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        groups: usize,
        order: RationalOrder,
        init: AffineInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = effective_groups(groups, d_in)?;
        let (a, b) = init_rational_identity(order.numer, order.denom)?;
        let numer = Tensor::new(vec![g, a.len()], a.repeat(g))?;
        let denom = Tensor::new(vec![g, b.len()], b.repeat(g))?;
        let numer = store.register(format!("{prefix}.numer"), numer)?;
        let denom = store.register(format!("{prefix}.denom"), denom)?;
        let linear = Affine::new(store, prefix, d_in, d_out, init, rng)?;
        Ok(GrKanLayer {
            rational: RationalParams {
                numer,
                denom,
                groups: g,
            },
            linear,
        })
    }

    pub fn d_in(&self) -> usize {
        self.linear.d_in
    }

    pub fn d_out(&self) -> usize {
        self.linear.d_out
    }

    /// Group-wise rational activations, before the affine map.
    pub fn activate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.d_in() {
            return Err(KfsError::shape("grkan", tape.shape(x), &[self.d_in()]));
        }
        let a = tape.param(store, self.rational.numer);
        let b = tape.param(store, self.rational.denom);
        tape.rational(x, a, b)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.activate(tape, store, x)?;
        self.linear.forward(tape, store, f)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.get(self.rational.numer).numel()
            + store.get(self.rational.denom).numel()
            + self.linear.param_count()
    }
}

/// Two GR-KAN units: `d_in → d_hidden → d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanBlock {
    pub unit1: GrKanLayer,
    pub unit2: GrKanLayer,
}

impl KanBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        groups: usize,
        order: RationalOrder,
        init: AffineInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let unit1 = GrKanLayer::new(store, &format!("{prefix}.unit1"), d_in, d_hidden, groups, order, init, rng)?;
        let unit2 = GrKanLayer::new(store, &format!("{prefix}.unit2"), d_hidden, d_out, groups, order, init, rng)?;
        Ok(KanBlock { unit1, unit2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if self.unit1.d_out() != self.unit2.d_in() {
            return Err(KfsError::Config(format!(
                "kan block chain mismatch: {} → {}",
                self.unit1.d_out(),
                self.unit2.d_in()
            )));
        }
        let h = self.unit1.forward(tape, store, x)?;
        self.unit2.forward(tape, store, h)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.unit1.param_count(store) + self.unit2.param_count(store)
    }
}

/// Affine → GELU → affine, with the hidden width chosen so the parameter
/// count tracks a KAN block of the same chain.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    pub fc1: Affine,
    pub fc2: Affine,
}

/// Hidden width whose MLP parameter count is closest to `target`.
pub fn matched_hidden_width(d_in: usize, d_out: usize, target: usize) -> usize {
    let per_unit = (d_in + 1 + d_out) as f64;
    (((target.saturating_sub(d_out)) as f64 / per_unit).round() as usize).max(1)
}

impl MlpBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        init: AffineInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fc1 = Affine::new(store, &format!("{prefix}.fc1"), d_in, d_hidden, init, rng)?;
        let fc2 = Affine::new(store, &format!("{prefix}.fc2"), d_hidden, d_out, init, rng)?;
        Ok(MlpBlock { fc1, fc2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if self.fc1.d_out != self.fc2.d_in {
            return Err(KfsError::Config(format!(
                "mlp block chain mismatch: {} → {}",
                self.fc1.d_out, self.fc2.d_in
            )));
        }
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Either representation block; the MLP variant is the KAN ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Kan(KanBlock),
    Mlp(MlpBlock),
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        use_kan: bool,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        groups: usize,
        order: RationalOrder,
        init: AffineInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if use_kan {
            return Ok(Block::Kan(KanBlock::new(
                store, prefix, d_in, d_hidden, d_out, groups, order, init, rng,
            )?));
        }
        let g1 = effective_groups(groups, d_in)?;
        let g2 = effective_groups(groups, d_hidden)?;
        let rational = (g1 + g2) * (order.numer + 1 + order.denom);
        let kan_count = rational + d_in * d_hidden + d_hidden + d_hidden * d_out + d_out;
        let hidden = matched_hidden_width(d_in, d_out, kan_count);
        Ok(Block::Mlp(MlpBlock::new(store, prefix, d_in, hidden, d_out, init, rng)?))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Block::Kan(b) => b.forward(tape, store, x),
            Block::Mlp(b) => b.forward(tape, store, x),
        }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        match self {
            Block::Kan(b) => b.param_count(store),
            Block::Mlp(b) => b.param_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn rational_eval_examples() {
        for x in [-3.0, 0.0, 0.5, 7.0] {
            assert_eq!(rational_eval(x, &[0.0, 1.0], &[]), x);
            assert_eq!(rational_eval(x, &[1.0], &[]), 1.0);
        }
        assert!((rational_eval(2.0, &[0.0, 0.0, 1.0], &[1.0]) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_init_is_identity() {
        let (a, b) = init_rational_identity(5, 4).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 4);
        for x in [-3.0, 0.0, 7.0] {
            assert_eq!(rational_eval(x, &a, &b), x);
        }
        assert!(init_rational_identity(0, 4).is_err());
    }

    #[test]
    fn group_rule() {
        assert_eq!(effective_groups(8, 4).unwrap(), 4);
        assert_eq!(effective_groups(8, 32).unwrap(), 8);
        assert!(effective_groups(8, 12).is_err());
    }

    #[test]
    fn identity_unit_and_block() {
        let mut store = ParamStore::new();
        let order = RationalOrder::default();
        let block = KanBlock::new(&mut store, "b", 4, 8, 4, 2, order, AffineInit::Identity, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 3.0, 9.0], vec![-0.1, 0.0, 1e3, -7.5]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn one_group_per_channel_matches_scalar_eval() {
        let mut store = ParamStore::new();
        let order = RationalOrder { numer: 3, denom: 2 };
        let layer = GrKanLayer::new(&mut store, "u", 3, 2, 3, order, AffineInit::Xavier, &mut rng()).unwrap();
        let mut r = rng();
        for v in store.get_mut(layer.rational.numer).data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        for v in store.get_mut(layer.rational.denom).data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.5], vec![1.0, 0.0, -0.4]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = layer.activate(&mut tape, &store, xv).unwrap();
        let a = store.get(layer.rational.numer).data();
        let b = store.get(layer.rational.denom).data();
        for row in 0..2 {
            for ch in 0..3 {
                let expect = rational_eval(x.at(row, ch), &a[ch * 4..ch * 4 + 4], &b[ch * 2..ch * 2 + 2]);
                assert_eq!(tape.value(f).at(row, ch), expect);
            }
        }
    }

    #[test]
    fn single_group_shares_activation() {
        let mut store = ParamStore::new();
        let layer = GrKanLayer::new(&mut store, "u", 4, 4, 1, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
        for (i, v) in store.get_mut(layer.rational.numer).data_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.2;
        }
        store.get_mut(layer.rational.denom).data_mut()[0] = 0.7;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_rows(&[vec![1.3, 1.3, -0.2, 1.3]]).unwrap());
        let f = layer.activate(&mut tape, &store, xv).unwrap();
        let out = tape.value(f).data();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], out[3]);
    }

    #[test]
    fn identity_rationals_reduce_block_to_two_affines() {
        let mut store = ParamStore::new();
        let block = KanBlock::new(&mut store, "b", 3, 5, 2, 1, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[vec![0.2, -0.9, 1.4], vec![2.0, 0.1, -3.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &store, xv).unwrap();

        // plain two-layer linear oracle
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.at(i, j)).sum::<f64>())
                .collect()
        };
        for r in 0..2 {
            let h = lin(x.row(r), store.get(block.unit1.linear.weight), store.get(block.unit1.linear.bias));
            let o = lin(&h, store.get(block.unit2.linear.weight), store.get(block.unit2.linear.bias));
            for (j, v) in o.iter().enumerate() {
                assert!((tape.value(y).at(r, j) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_and_divisibility_errors() {
        let mut store = ParamStore::new();
        assert!(GrKanLayer::new(&mut store, "u", 6, 4, 4, RationalOrder::default(), AffineInit::Xavier, &mut rng()).is_err());

        let mut store = ParamStore::new();
        let mut block = KanBlock::new(&mut store, "b", 4, 8, 4, 2, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
        block.unit2 = GrKanLayer::new(&mut store, "c", 4, 4, 2, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(block.forward(&mut tape, &store, x), Err(KfsError::Config(_))));
    }

    #[test]
    fn mlp_zero_weights_output_final_bias() {
        let mut store = ParamStore::new();
        let mlp = MlpBlock::new(&mut store, "m", 3, 6, 2, AffineInit::Zeros, &mut rng()).unwrap();
        store.get_mut(mlp.fc2.bias).data_mut().copy_from_slice(&[0.25, -4.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn mlp_parameter_count_tracks_kan() {
        for &(din, dh, dout, g) in &[(4, 8, 4, 4), (8, 16, 8, 2), (128, 256, 128, 8), (256, 256, 128, 8), (16, 32, 8, 8)] {
            let mut ks = ParamStore::new();
            let kan = Block::new(&mut ks, "k", true, din, dh, dout, g, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
            let mut ms = ParamStore::new();
            let mlp = Block::new(&mut ms, "k", false, din, dh, dout, g, RationalOrder::default(), AffineInit::Xavier, &mut rng()).unwrap();
            let (k, m) = (kan.param_count(&ks) as f64, mlp.param_count(&ms) as f64);
            assert_eq!(k as usize, ks.scalar_count());
            assert!((k - m).abs() / k < 0.05, "{din}/{dh}/{dout}: kan {k} mlp {m}");
        }
    }
}
