use gnnformer::embed::{SceneInput, Variant};
use gnnformer::gradcheck::tiny_config;
use gnnformer::graph::GraphBuilder;
use gnnformer::interpret::*;
use gnnformer::scene::{generate_scene, Grade, Scene, SceneParams};
use gnnformer::tensor::{AttnKind, Tensor};
use gnnformer::Model64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::{naive_importance, naive_relevance, Mat};

fn random_layer(rng: &mut ChaCha8Rng, kind: AttnKind, heads: usize, q: usize, k: usize) -> LayerAttention {
    let mut probs = Vec::with_capacity(heads * q * k);
    for _ in 0..heads * q {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / s));
    }
    let grads = (0..heads * q * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    LayerAttention {
        kind,
        heads,
        queries: q,
        keys: k,
        probs,
        grads,
    }
}

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn scene(seed: u64) -> Scene {
    let params = SceneParams {
        min_cells: 10,
        max_cells: 22,
        ..SceneParams::default()
    };
    generate_scene(seed, Grade::ALL[seed as usize % 3], &params).unwrap()
}

fn setup(seed: u64) -> (Model64, Scene, SceneInput) {
    let s = scene(seed);
    let input = SceneInput::new(&s, &GraphBuilder::for_scene(&s, 3)).unwrap();
    (Model64::new(tiny_config(Variant::Full, 12), seed).unwrap(), s, input)
}

#[test]
fn propagation_matches_naive_on_random_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (ne, nd) = (rng.gen_range(1..9), rng.gen_range(1..7));
        let mut layers = Vec::new();
        for _ in 0..rng.gen_range(1..4) {
            layers.push(random_layer(&mut rng, AttnKind::EncoderSelf, 2, ne, ne));
        }
        for _ in 0..rng.gen_range(1..4) {
            layers.push(random_layer(&mut rng, AttnKind::DecoderSelf, 2, nd, nd));
            layers.push(random_layer(&mut rng, AttnKind::DecoderCross, 2, nd, ne));
        }
        let got = to_mat(&propagate(&layers, ne, nd).unwrap());
        let want = naive_relevance(&layers, ne, nd);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn model_importance_matches_naive() {
    for seed in 0..4 {
        let (model, _, input) = setup(seed);
        let report = [4, 7, 5, 9, 6, 10];
        for pos in [0, 3, 5] {
            let got = importance(&model, &input, &report, pos).unwrap();
            let want = naive_importance(&model, &input, &report, pos);
            assert_eq!(got.len(), input.n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9, "seed {seed} pos {pos}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn one_hot_cross_attention_selects_its_key() {
    let (nd, ne, j) = (2, 5, 3);
    let mut probs = vec![0.0; nd * ne];
    for q in 0..nd {
        probs[q * ne + j] = 1.0;
    }
    let layer = LayerAttention {
        kind: AttnKind::DecoderCross,
        heads: 1,
        queries: nd,
        keys: ne,
        probs,
        grads: vec![1.0; nd * ne],
    };
    let r = propagate(&[layer], ne, nd).unwrap();
    for q in 0..nd {
        let want: Vec<f64> = (0..ne).map(|k| if k == j { 1.0 } else { 0.0 }).collect();
        assert_eq!(r.row(q), want.as_slice());
    }
}

#[test]
fn negative_gradients_are_clipped() {
    let layer = LayerAttention {
        kind: AttnKind::DecoderCross,
        heads: 2,
        queries: 1,
        keys: 2,
        probs: vec![0.5, 0.5, 0.5, 0.5],
        grads: vec![-1.0, 2.0, 4.0, -3.0],
    };
    let a = head_mean_relevance(&layer);
    assert_eq!(a.row(0), &[1.0, 0.5]);
}

#[test]
fn zero_residual_rows_stay_identity() {
    let r = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap();
    let n = normalize_residual(&r);
    assert_eq!(n.row(0), &[1.0, 0.0]);
    // row 1 of R − I is [0.5, 1.0], normalized to [1/3, 2/3]
    assert!((n.row(1)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((n.row(1)[1] - 5.0 / 3.0).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_rejected() {
    let layer = LayerAttention {
        kind: AttnKind::EncoderSelf,
        heads: 1,
        queries: 2,
        keys: 3,
        probs: vec![0.0; 6],
        grads: vec![0.0; 6],
    };
    assert!(propagate(&[layer], 2, 1).is_err());
}

#[test]
fn standardize_maps_to_unit_interval() {
    assert_eq!(standardize(&[2.0, 2.0, 2.0]), vec![1.0; 3]);
    assert_eq!(standardize(&[]), Vec::<f64>::new());
    assert_eq!(standardize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
}

#[test]
fn uniform_attention_gives_uniform_scores() {
    let (ne, nd) = (4, 3);
    let uniform = |kind, q: usize, k: usize| LayerAttention {
        kind,
        heads: 2,
        queries: q,
        keys: k,
        probs: vec![1.0 / k as f64; 2 * q * k],
        grads: vec![1.0; 2 * q * k],
    };
    let layers = [
        uniform(AttnKind::EncoderSelf, ne, ne),
        uniform(AttnKind::DecoderSelf, nd, nd),
        uniform(AttnKind::DecoderCross, nd, ne),
    ];
    let r = propagate(&layers, ne, nd).unwrap();
    assert_eq!(standardize(r.row(nd - 1)), vec![1.0; ne]);
}

#[test]
fn conclusion_keyword_position() {
    let t = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert_eq!(conclusion_position(&t("a b conclusion : high grade cancer .")), Some(4));
    assert_eq!(conclusion_position(&t("low grade x low grade")), Some(3));
    assert_eq!(conclusion_position(&t("impression : normal .")), Some(2));
    assert_eq!(conclusion_position(&t("insufficient information")), Some(0));
    assert_eq!(conclusion_position(&t("a b c")), Some(2));
    assert_eq!(conclusion_position(&[]), None);
}

#[test]
fn colormap_endpoints_and_clamping() {
    assert_eq!(colormap(0.0), "#440154");
    assert_eq!(colormap(1.0), "#fde725");
    assert_eq!(colormap(2.0), colormap(1.0));
    assert_eq!(colormap(f64::NAN), colormap(0.0));
    let lum = |h: &str| {
        let c = |i| u8::from_str_radix(&h[i..i + 2], 16).unwrap() as f64;
        0.2126 * c(1) + 0.7152 * c(3) + 0.0722 * c(5)
    };
    let l: Vec<f64> = (0..=20).map(|i| lum(&colormap(i as f64 / 20.0))).collect();
    assert!(l.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn no_graph_variant_has_no_cell_map() {
    let s = scene(1);
    let input = SceneInput::new(&s, &GraphBuilder::for_scene(&s, 3)).unwrap();
    let model = Model64::new(tiny_config(Variant::NoGraph, 12), 1).unwrap();
    assert!(importance(&model, &input, &[4, 5], 1).is_err());
}

#[test]
fn out_of_range_target_is_rejected() {
    let (model, _, input) = setup(2);
    assert!(importance(&model, &input, &[4, 5], 2).is_err());
}

#[test]
fn overlay_has_one_circle_per_cell_and_sidecar() {
    let (_, s, input) = setup(3);
    let vocab = gnnformer::scene::build_vocabulary(&s.reports);
    let model = Model64::new(tiny_config(Variant::Full, vocab.len()), 3).unwrap();
    let (map, words) = importance_map(&model, &s, &input, &vocab, Some(0)).unwrap();
    assert!(!words.is_empty());
    assert_eq!(map.scores.len(), s.n());
    assert!(map.scores.iter().all(|v| (0.0..=1.0).contains(v)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.svg");
    render_overlay(&s, &map, &path).unwrap();
    let svg = std::fs::read_to_string(&path).unwrap();
    assert_eq!(svg.matches("<circle").count(), s.n());
    assert!(svg.contains("linearGradient"));
    let back: ImportanceMap = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(back, map);

    let short = ImportanceMap {
        scores: vec![0.5],
        ..map
    };
    assert!(overlay_svg(&s, &short).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn importance_is_permutation_equivariant(seed in 0u64..200, pos in 0usize..4) {
        let (model, s, input) = setup(seed);
        let n = s.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let t = support::permute_scene(&s, &perm);
        let tin = SceneInput::new(&t, &GraphBuilder::for_scene(&t, 3)).unwrap();
        let report = [5, 4, 8, 6];
        let a = importance(&model, &input, &report, pos).unwrap();
        let b = importance(&model, &tin, &report, pos).unwrap();
        for i in 0..n {
            prop_assert!((a[i] - b[perm[i]]).abs() <= 1e-9 * a[i].abs().max(1.0), "{} vs {}", a[i], b[perm[i]]);
        }
    }
}
