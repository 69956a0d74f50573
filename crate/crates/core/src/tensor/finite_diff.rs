//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever re-runs the forward pass, so it shares no
//! code with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Step used by every gradient check.
pub const STEP: f64 = 1e-5;

/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights,
/// so every output element contributes a generic amount.
pub fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Worst relative error between backprop and central differences over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_subset(inputs, build, None)
}

/// Like [`check`], but perturbs at most `max_per_input` elements per input
/// (evenly strided) to bound the cost on large tensors.
pub fn check_subset<F>(inputs: &[Tensor<f64>], build: F, max_per_input: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out, 0x5eed)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, 0x5eed)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        let n = inputs[i].numel();
        let stride = match max_per_input {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - STEP;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("shape matches")
}
