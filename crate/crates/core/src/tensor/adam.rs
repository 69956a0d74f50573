use crate::scalar::Scalar;
use crate::tensor::param::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor<T> {
        &self.m[index]
    }

    /// One update. Parameters without a gradient, or frozen ones, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(t));
        let bc2 = T::one() - T::of(c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = store_with(&[0.5, -2.0]);
        let id = store.id("w").unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        adam.step(&mut store, &g);
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        let expected = 0.001 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - (0.5 - expected)).abs() < 1e-15);
        assert!((store.get(id).data()[1] - (-2.0 - expected)).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = store_with(&[0.25, 3.0, -1.0]);
        let id = store.id("w").unwrap();
        let before = store.get(id).clone();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::zeros(&[3]));
        for _ in 0..5 {
            adam.step(&mut store, &g);
        }
        assert_eq!(store.get(id), &before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = store_with(&[1.0]);
        let id = store.id("w").unwrap();
        store.set_trainable(id, false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::from_f64(&[1], &[5.0]).unwrap());
        adam.step(&mut store, &g);
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut store = store_with(&[0.1, 0.2, 0.3]);
            let id = store.id("w").unwrap();
            let mut adam = AdamState::new(&store, AdamConfig { lr: 0.01, ..AdamConfig::default() });
            for k in 0..20 {
                let mut g = ParamGrads::empty(1);
                let x = k as f64;
                g.set(id, Tensor::from_f64(&[3], &[x.sin(), x.cos(), 0.5 - x]).unwrap());
                adam.step(&mut store, &g);
            }
            store.get(id).clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
