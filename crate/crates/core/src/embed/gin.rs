use crate::error::Result;
use crate::nn::{Init, Mlp2};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `(1 + eps) · h_i + mean_{j ∈ N(i)} h_j`, zero mean for isolated nodes.
pub fn gin_combine<T: Scalar>(tape: &mut Tape<T>, h: Var, eps: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
    let own = tape.scale_by(h, eps, T::one())?;
    let agg = tape.neighbor_mean(h, neighbors)?;
    tape.add(own, agg)
}

#[derive(Debug, Clone, Copy)]
pub struct GinLayer {
    pub eps: ParamId,
    pub mlp: Mlp2,
}

impl GinLayer {
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        neighbors: &[Vec<usize>],
    ) -> Result<Var> {
        let eps = tape.param(store, self.eps);
        let z = gin_combine(tape, h, eps, neighbors)?;
        self.mlp.forward(tape, store, z)
    }
}

#[derive(Debug, Clone)]
pub struct GinStack {
    pub layers: Vec<GinLayer>,
    /// Layer weights; one extra leading entry when the input layer is included.
    pub alpha: ParamId,
    pub include_input: bool,
}

impl GinStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        d: usize,
        layers: usize,
        include_input: bool,
    ) -> Self {
        let layers: Vec<GinLayer> = (0..layers)
            .map(|l| GinLayer {
                eps: store.add(format!("gin.{l}.eps"), Tensor::zeros(&[1])),
                mlp: Mlp2::new(store, init, &format!("gin.{l}.mlp"), d, d, d),
            })
            .collect();
        let count = layers.len() + usize::from(include_input);
        let alpha = store.add("gin.alpha", Tensor::full(&[count], T::of(1.0 / count as f64)));
        Self {
            layers,
            alpha,
            include_input,
        }
    }

    /// Per-layer states `H(1) … H(L)`.
    pub fn layer_states<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h0: Var,
        neighbors: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        let mut h = h0;
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(tape, store, h, neighbors)?;
            states.push(h);
        }
        Ok(states)
    }

    /// `Σ_l alpha_l · H(l)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h0: Var,
        neighbors: &[Vec<usize>],
    ) -> Result<Var> {
        let states = self.layer_states(tape, store, h0, neighbors)?;
        let alpha = tape.param(store, self.alpha);
        let mut all = Vec::with_capacity(states.len() + 1);
        if self.include_input {
            all.push(h0);
        }
        all.extend(states);
        aggregate_layers(tape, alpha, &all)
    }
}

/// Weighted sum of layer states.
pub fn aggregate_layers<T: Scalar>(tape: &mut Tape<T>, alpha: Var, states: &[Var]) -> Result<Var> {
    tape.weighted_sum(alpha, states)
}
