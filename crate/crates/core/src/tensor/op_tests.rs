use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::finite_diff::{check, random_tensor};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::identity(2)).unwrap();
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
    let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradcheck() {
    let mut r = rng(1);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[4, 2], 1.0, &mut r);
    let err = check(&[a, b], |tp, v| tp.matmul(v[0], v[1])).unwrap();
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0., 0.])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[1000., 0.])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
}

#[test]
fn softmax_gradcheck_vector_and_axes() {
    let mut r = rng(2);
    let x = random_tensor(&[5], 2.0, &mut r);
    let err = check(&[x], |tp, v| tp.softmax(v[0], 0)).unwrap();
    assert!(err < 1e-6, "softmax rel err {err}");

    let x = random_tensor(&[3, 4], 2.0, &mut r);
    for axis in 0..2 {
        let err = check(std::slice::from_ref(&x), |tp, v| tp.softmax(v[0], axis)).unwrap();
        assert!(err < 1e-6, "softmax axis {axis} rel err {err}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let x = tape.constant(t(&[1, 3], &[5., 5., 5.])).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

    let g = tape.constant(Tensor::ones(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let x = tape.constant(t(&[1, 2], &[1., -1.])).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    let v = tape.value(y).data();
    // var = 1, so the eps floor shifts the result by ~5e-6
    assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradcheck() {
    let mut r = rng(3);
    let x = random_tensor(&[2, 8], 2.0, &mut r);
    let g = random_tensor(&[8], 1.0, &mut r);
    let b = random_tensor(&[8], 1.0, &mut r);
    let err = check(&[x, g, b], |tp, v| tp.layer_norm(v[0], v[1], v[2])).unwrap();
    assert!(err < 1e-5, "layer_norm rel err {err}");
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    let loss = tape.cross_entropy(logits, &[1, 2, 3], 0).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 80.0] {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t(&[1, 3], &[0., margin, 0.])).unwrap();
        let lv = tape.cross_entropy(logits, &[1], 0).unwrap();
        let loss = tape.value(lv).item();
        assert!(loss < prev);
        prev = loss;
    }
    assert!(prev < 1e-30);
}

#[test]
fn cross_entropy_matches_direct_formula_and_skips_pad() {
    let mut r = rng(4);
    let logits = random_tensor(&[3, 5], 3.0, &mut r);
    let targets = [4, 0, 2];
    let pad = 0;
    // direct: -log softmax[target], averaged over the two non-pad rows
    let direct = |row: &[f64], tgt: usize| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[tgt].exp() / z).ln()
    };
    let expected = (direct(logits.row(0), 4) + direct(logits.row(2), 2)) / 2.0;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone()).unwrap();
    let loss = tape.cross_entropy(l, &targets, pad).unwrap();
    assert!((tape.value(loss).item() - expected).abs() < 1e-12);

    let err = check(&[logits], |tp, v| tp.cross_entropy(v[0], &targets, pad)).unwrap();
    assert!(err < 1e-6, "cross_entropy rel err {err}");
}

#[test]
fn cross_entropy_all_pad_is_error() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
    assert!(matches!(tape.cross_entropy(logits, &[0, 0], 0), Err(Error::EmptyTarget)));
}

#[test]
fn elementwise_ops_gradcheck() {
    let mut r = rng(5);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[3, 4], 1.0, &mut r);
    let row = random_tensor(&[4], 1.0, &mut r);
    let s = random_tensor(&[1], 1.0, &mut r);
    let cases: Vec<(&str, f64)> = vec![
        ("add", check(&[a.clone(), b.clone()], |tp, v| tp.add(v[0], v[1])).unwrap()),
        ("sub", check(&[a.clone(), b.clone()], |tp, v| tp.sub(v[0], v[1])).unwrap()),
        ("mul", check(&[a.clone(), b.clone()], |tp, v| tp.mul(v[0], v[1])).unwrap()),
        ("add_row", check(&[a.clone(), row.clone()], |tp, v| tp.add_row(v[0], v[1])).unwrap()),
        ("scale", check(std::slice::from_ref(&a), |tp, v| tp.scale(v[0], -1.7)).unwrap()),
        ("scale_by", check(&[a.clone(), s.clone()], |tp, v| tp.scale_by(v[0], v[1], 1.0)).unwrap()),
        ("gelu", check(std::slice::from_ref(&a), |tp, v| tp.gelu(v[0])).unwrap()),
        ("sum", check(std::slice::from_ref(&a), |tp, v| tp.sum(v[0])).unwrap()),
        ("mean", check(std::slice::from_ref(&a), |tp, v| tp.mean(v[0])).unwrap()),
        ("element", check(std::slice::from_ref(&a), |tp, v| tp.element(v[0], 5)).unwrap()),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name} rel err {err}");
    }
}

#[test]
fn relu_gradcheck_away_from_kink() {
    let a = t(&[2, 3], &[-1.0, 0.5, 0.01, 2.0, -0.3, 0.7]);
    let err = check(&[a], |tp, v| tp.relu(v[0])).unwrap();
    assert!(err < 1e-6, "relu rel err {err}");
}

#[test]
fn structural_ops_gradcheck() {
    let mut r = rng(6);
    let a = random_tensor(&[3, 4], 1.0, &mut r);
    let b = random_tensor(&[2, 4], 1.0, &mut r);
    let c = random_tensor(&[3, 2], 1.0, &mut r);
    let table = random_tensor(&[5, 4], 1.0, &mut r);
    let alpha = random_tensor(&[3], 1.0, &mut r);
    let e1 = check(&[a.clone(), b.clone()], |tp, v| tp.concat_rows(&[v[0], v[1]])).unwrap();
    let e2 = check(&[a.clone(), c.clone()], |tp, v| tp.concat_cols(&[v[0], v[1]])).unwrap();
    let e3 = check(std::slice::from_ref(&a), |tp, v| tp.slice_rows(v[0], 1, 3)).unwrap();
    let e4 = check(&[table], |tp, v| tp.gather_rows(v[0], &[3, 0, 3, 4])).unwrap();
    let nbrs = vec![vec![1, 2], vec![0], vec![]];
    let e5 = check(std::slice::from_ref(&a), |tp, v| tp.neighbor_mean(v[0], &nbrs)).unwrap();
    let e6 = check(&[alpha, a.clone(), a.map(|x| x * 0.5 + 0.1), a.map(|x| -x)], |tp, v| {
        tp.weighted_sum(v[0], &[v[1], v[2], v[3]])
    })
    .unwrap();
    for (name, err) in [("concat_rows", e1), ("concat_cols", e2), ("slice_rows", e3), ("gather_rows", e4), ("neighbor_mean", e5), ("weighted_sum", e6)] {
        assert!(err < 1e-6, "{name} rel err {err}");
    }
}

#[test]
fn attention_gradcheck_with_masks() {
    let mut r = rng(7);
    let q = random_tensor(&[4, 8], 1.0, &mut r);
    let k = random_tensor(&[4, 8], 1.0, &mut r);
    let v = random_tensor(&[4, 8], 1.0, &mut r);
    for mask in [
        AttnMask::none(),
        AttnMask::causal(),
        AttnMask::keys(vec![true, false, true, true]),
    ] {
        let err = check(&[q.clone(), k.clone(), v.clone()], |tp, x| {
            tp.attention(x[0], x[1], x[2], 2, &mask, None)
        })
        .unwrap();
        assert!(err < 1e-6, "attention rel err {err} with {mask:?}");
    }
    // cross attention: different query and key counts
    let kc = random_tensor(&[6, 8], 1.0, &mut r);
    let vc = random_tensor(&[6, 8], 1.0, &mut r);
    let err = check(&[q, kc, vc], |tp, x| tp.attention(x[0], x[1], x[2], 4, &AttnMask::none(), None)).unwrap();
    assert!(err < 1e-6, "cross attention rel err {err}");
}

#[test]
fn attention_masked_keys_get_exact_zero() {
    let mut r = rng(8);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(random_tensor(&[3, 4], 1.0, &mut r)).unwrap();
    let k = tape.constant(random_tensor(&[3, 4], 1.0, &mut r)).unwrap();
    let v = tape.constant(random_tensor(&[3, 4], 1.0, &mut r)).unwrap();
    let tag = AttnTag { kind: AttnKind::EncoderSelf, layer: 0 };
    let mask = AttnMask { causal: true, offset: 0, key_valid: Some(vec![true, true, false]) };
    tape.attention(q, k, v, 2, &mask, Some(tag)).unwrap();
    let rec = &tape.attention_probs()[0];
    for h in 0..2 {
        for i in 0..3 {
            let row = &rec.probs[(h * 3 + i) * 3..(h * 3 + i + 1) * 3];
            for (j, &p) in row.iter().enumerate() {
                if !mask.allowed(i, j) {
                    assert_eq!(p, 0.0);
                }
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(9);
    let w = random_tensor(&[4, 3], 1.0, &mut r);
    let x = random_tensor(&[2, 4], 1.0, &mut r);
    let run = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let wv = tape.leaf(w.clone(), true).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(xv, wv).unwrap();
        let l1 = tape.cross_entropy(y, &[1, 2], 0).unwrap();
        let act = tape.gelu(y).unwrap();
        let l2 = tape.mean(act).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        tape.backward(loss).unwrap().wrt(&tape, wv)
    };
    let (g1, g2, g12) = (run(1), run(2), run(0));
    let mut sum = g1.clone();
    sum.add_assign(&g2);
    assert!(sum.max_abs_diff(&g12) < 1e-14);
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[2], &[1., 2.]), true).unwrap();
    let b = tape.leaf(t(&[2], &[3., 4.]), true).unwrap();
    let loss = tape.sum(a).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, a).data(), &[1., 1.]);
    assert_eq!(g.wrt(&tape, b).data(), &[0., 0.]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.scale(a, 1e300), Err(Error::NonFinite { .. })));
}

#[test]
fn dropout_only_on_training_tapes() {
    let x = Tensor::<f64>::ones(&[4, 16]);
    let mut eval = Tape::new();
    let v = eval.constant(x.clone()).unwrap();
    assert_eq!(eval.dropout(v, 0.5).unwrap(), v);

    let mut train = Tape::training(rng(10));
    let v = train.leaf(x, true).unwrap();
    let d = train.dropout(v, 0.5).unwrap();
    let vals = train.value(d).data();
    assert!(vals.iter().all(|&z| z == 0.0 || z == 2.0));
    assert!(vals.contains(&0.0) && vals.contains(&2.0));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::from_vec(&[3, 4], vals).unwrap();
            for axis in 0..2 {
                let y = kernels::softmax(&x, axis).unwrap();
                prop_assert!(y.data().iter().all(|&p| p >= 0.0));
                let (outer, len) = if axis == 1 { (3, 4) } else { (4, 3) };
                for o in 0..outer {
                    let s: f64 = (0..len).map(|t| if axis == 1 { y.get2(o, t) } else { y.get2(t, o) }).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn matmul_gradient_matches_finite_differences(seed in 0u64..1000) {
            let mut r = rng(seed);
            let a = random_tensor(&[2, 3], 2.0, &mut r);
            let b = random_tensor(&[3, 2], 2.0, &mut r);
            let err = check(&[a, b], |tp, v| tp.matmul(v[0], v[1])).unwrap();
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn layer_norm_gradient_matches_finite_differences(seed in 0u64..1000) {
            let mut r = rng(seed);
            let x = random_tensor(&[2, 5], 3.0, &mut r);
            let g = random_tensor(&[5], 1.0, &mut r);
            let b = random_tensor(&[5], 1.0, &mut r);
            let err = check(&[x, g, b], |tp, v| tp.layer_norm(v[0], v[1], v[2])).unwrap();
            prop_assert!(err < 1e-4);
        }

        #[test]
        fn attention_gradient_matches_finite_differences(seed in 0u64..1000) {
            let mut r = rng(seed);
            let q = random_tensor(&[3, 4], 1.5, &mut r);
            let k = random_tensor(&[3, 4], 1.5, &mut r);
            let v = random_tensor(&[3, 4], 1.5, &mut r);
            let err = check(&[q, k, v], |tp, x| tp.attention(x[0], x[1], x[2], 2, &AttnMask::causal(), None)).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
