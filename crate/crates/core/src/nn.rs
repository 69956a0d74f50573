//! Parameterized building blocks shared by the embedding and Transformer code.
//!
//! Each block holds [`ParamId`]s only. `forward` records on a tape; `apply`
//! evaluates the same function directly on tensors for tape-free inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `[fan_in × fan_out]`.
    pub fn glorot<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(&[fan_in, fan_out], data).expect("shape matches")
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], sd: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, sd).expect("positive sd");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init.glorot(din, dout)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::linear(x, store.get(self.w), store.get(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::layer_norm_forward(x, store.get(self.gain), store.get(self.bias))?.0)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, init, &format!("{name}.0"), din, hidden),
            l2: Linear::new(store, init, &format!("{name}.1"), hidden, dout),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}
