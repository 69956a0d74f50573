//! Finite-difference gradient suite over every tape op and the full
//! scene-to-loss composition, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::{PeMode, SceneInput, Variant};
use crate::error::Result;
use crate::graph::GraphBuilder;
use crate::model::{Model, ModelConfig};
use crate::scene::{build_vocabulary, generate_scene, Grade, SceneParams};
use crate::tensor::finite_diff::{check, random_tensor, relative_error, STEP};
use crate::tensor::{AttnMask, Tape};

/// Per-op tolerance on the worst relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end check on a parameter subsample.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn op(name: &str, err: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_rel_err: err,
        tolerance: OP_TOLERANCE,
    }
}

/// Checks every differentiable op on random inputs.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[3, 4], 1.0, &mut r);
    let m = random_tensor(&[4, 2], 1.0, &mut r);
    let row = random_tensor(&[4], 1.0, &mut r);
    let s = random_tensor(&[1], 1.0, &mut r);
    let c = random_tensor(&[3, 2], 1.0, &mut r);
    let b2 = random_tensor(&[2, 4], 1.0, &mut r);
    let table = random_tensor(&[5, 4], 1.0, &mut r);
    let alpha = random_tensor(&[3], 1.0, &mut r);
    let gain = random_tensor(&[4], 1.0, &mut r).map(|x| x + 1.5);
    let logits = random_tensor(&[4, 6], 2.0, &mut r);
    let q = random_tensor(&[4, 8], 1.0, &mut r);
    let k = random_tensor(&[4, 8], 1.0, &mut r);
    let v = random_tensor(&[4, 8], 1.0, &mut r);
    let kc = random_tensor(&[6, 8], 1.0, &mut r);
    let vc = random_tensor(&[6, 8], 1.0, &mut r);
    // ReLU inputs kept away from the kink at zero.
    let relu_in = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    let nbrs = vec![vec![1, 2], vec![0], vec![0, 1]];

    let mut out = vec![
        op("matmul", check(&[a.clone(), m.clone()], |tp, x| tp.matmul(x[0], x[1]))?),
        op("add", check(&[a.clone(), b.clone()], |tp, x| tp.add(x[0], x[1]))?),
        op("sub", check(&[a.clone(), b.clone()], |tp, x| tp.sub(x[0], x[1]))?),
        op("mul", check(&[a.clone(), b.clone()], |tp, x| tp.mul(x[0], x[1]))?),
        op("add_row", check(&[a.clone(), row.clone()], |tp, x| tp.add_row(x[0], x[1]))?),
        op("scale", check(std::slice::from_ref(&a), |tp, x| tp.scale(x[0], -1.7))?),
        op("scale_by", check(&[a.clone(), s.clone()], |tp, x| tp.scale_by(x[0], x[1], 1.0))?),
        op("add_const", check(std::slice::from_ref(&a), |tp, x| tp.add_const(x[0], &b))?),
        op("relu", check(&[relu_in], |tp, x| tp.relu(x[0]))?),
        op("gelu", check(std::slice::from_ref(&a), |tp, x| tp.gelu(x[0]))?),
        op("softmax", check(std::slice::from_ref(&a), |tp, x| tp.softmax(x[0], 1))?),
        op(
            "layer_norm",
            check(&[a.clone(), gain, row.clone()], |tp, x| tp.layer_norm(x[0], x[1], x[2]))?,
        ),
        op(
            "cross_entropy",
            check(&[logits], |tp, x| tp.cross_entropy(x[0], &[1, 0, 5, 3], 0))?,
        ),
        op("neighbor_mean", check(std::slice::from_ref(&a), |tp, x| tp.neighbor_mean(x[0], &nbrs))?),
        op(
            "weighted_sum",
            check(&[alpha, a.clone(), b.clone(), a.map(|x| -x)], |tp, x| {
                tp.weighted_sum(x[0], &[x[1], x[2], x[3]])
            })?,
        ),
        op("concat_rows", check(&[a.clone(), b2], |tp, x| tp.concat_rows(&[x[0], x[1]]))?),
        op("concat_cols", check(&[a.clone(), c], |tp, x| tp.concat_cols(&[x[0], x[1]]))?),
        op("slice_rows", check(std::slice::from_ref(&a), |tp, x| tp.slice_rows(x[0], 1, 3))?),
        op("gather_rows", check(&[table], |tp, x| tp.gather_rows(x[0], &[3, 0, 3, 4]))?),
        op("sum", check(std::slice::from_ref(&a), |tp, x| tp.sum(x[0]))?),
        op("mean", check(std::slice::from_ref(&a), |tp, x| tp.mean(x[0]))?),
        op("element", check(std::slice::from_ref(&a), |tp, x| tp.element(x[0], 5))?),
    ];
    for (name, mask) in [
        ("attention", AttnMask::none()),
        ("attention_causal", AttnMask::causal()),
        ("attention_key_mask", AttnMask::keys(vec![true, false, true, true])),
    ] {
        out.push(op(
            name,
            check(&[q.clone(), k.clone(), v.clone()], |tp, x| tp.attention(x[0], x[1], x[2], 2, &mask, None))?,
        ));
    }
    out.push(op(
        "attention_cross",
        check(&[q, kc, vc], |tp, x| tp.attention(x[0], x[1], x[2], 4, &AttnMask::none(), None))?,
    ));
    Ok(out)
}

/// Small f64 model configuration used by the end-to-end check.
pub fn tiny_config(variant: Variant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 32,
        gnn_layers: 2,
        encoder_width: 16,
        pe_mode: PeMode::Learned,
        agg_include_input: true,
        dropout: 0.0,
        max_len: 64,
        vocab_size,
    }
}

/// Scene to loss, perturbing up to `per_param` elements of every trainable parameter.
pub fn end_to_end_check(variant: Variant, seed: u64, per_param: usize) -> Result<CheckResult> {
    let params = SceneParams {
        min_cells: 12,
        max_cells: 20,
        ..SceneParams::default()
    };
    let scene = generate_scene(seed, Grade::ALL[seed as usize % 3], &params)?;
    let vocab = build_vocabulary(&scene.reports);
    let input = SceneInput::new(&scene, &GraphBuilder::for_scene(&scene, 3))?;
    let gold = vocab.encode_report(&scene.reports[0]);
    let mut model = Model::<f64>::new(tiny_config(variant, vocab.len()), seed)?;

    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &input, &gold)?;
    let grads = tape.backward(loss)?.param_grads(&model.params);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let ids: Vec<_> = model.params.ids().filter(|&id| model.params.is_trainable(id)).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let Some(g) = grads.get(id).cloned() else { continue };
        let n = g.numel();
        for _ in 0..per_param.min(n) {
            let j = rng.gen_range(0..n);
            let orig = model.params.get(id).data()[j];
            let eval = |x: f64, model: &mut Model<f64>| -> Result<f64> {
                model.params.get_mut(id).data_mut()[j] = x;
                let mut tape = Tape::new();
                let l = model.loss(&mut tape, &input, &gold)?;
                Ok(tape.value(l).item())
            };
            let plus = eval(orig + STEP, &mut model)?;
            let minus = eval(orig - STEP, &mut model)?;
            model.params.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(relative_error(g.data()[j], (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(CheckResult {
        name: format!("end_to_end_{variant}"),
        max_rel_err: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// All op checks plus an end-to-end check per model variant.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    for variant in Variant::ALL {
        out.push(end_to_end_check(variant, seed, 3)?);
    }
    Ok(out)
}
