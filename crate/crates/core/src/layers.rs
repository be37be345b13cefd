use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineInit {
    /// Uniform in ±√(6/(d_in+d_out)), zero bias.
    Xavier,
    /// Rectangular identity weight, zero bias.
    Identity,
    Zeros,
}

pub(crate) fn init_weight(init: AffineInit, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        AffineInit::Xavier => {
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            let data = (0..d_in * d_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new(vec![d_in, d_out], data).expect("weight shape")
        }
        AffineInit::Identity => Tensor::eye(d_in, d_out),
        AffineInit::Zeros => Tensor::zeros(&[d_in, d_out]),
    }
}

/// `x · W + b` with `W: [d_in × d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: AffineInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{prefix}.weight"), init_weight(init, d_in, d_out, rng))?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Affine {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}
