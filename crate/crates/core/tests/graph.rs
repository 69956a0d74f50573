use gnnformer::graph::*;
use gnnformer::scene::{generate_scene, Cell, Grade, Scene, SceneParams, NUM_ATTRS};
use gnnformer::Error;
use proptest::prelude::*;
use std::collections::BTreeSet;

mod support;

fn scene_from(points: &[(f64, f64)], attrs: impl Fn(usize) -> Vec<f64>) -> Scene {
    Scene {
        id: 0,
        width: 256.0,
        height: 256.0,
        grade: Grade::LowGrade,
        cells: points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Cell {
                id: i,
                x,
                y,
                attrs: attrs(i),
            })
            .collect(),
        reports: vec![],
        seed: 0,
    }
}

fn oracle(scene: &Scene, k: usize) -> Vec<Vec<usize>> {
    support::knn_oracle(scene, k, DEFAULT_COORD_WEIGHT)
}

fn random_scene(seed: u64) -> Scene {
    generate_scene(seed, Grade::ALL[seed as usize % 3], &SceneParams::default()).unwrap()
}

#[test]
fn collinear_example() {
    let s = scene_from(&[(0.0, 5.0), (1.0, 5.0), (3.0, 5.0)], |_| vec![1.0; NUM_ATTRS]);
    let g = build_cell_graph(&s, 1).unwrap();
    assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    assert_eq!(neighbors(&g, 1).unwrap(), &[0, 2]);
    assert_eq!(neighbors(&g, 0).unwrap(), &[1]);
}

#[test]
fn single_cell_has_no_edges() {
    let s = scene_from(&[(4.0, 4.0)], |_| vec![0.5; NUM_ATTRS]);
    for k in [1, 5] {
        let g = build_cell_graph(&s, k).unwrap();
        assert!(g.edges().is_empty());
        assert!(neighbors(&g, 0).unwrap().is_empty());
    }
}

#[test]
fn errors() {
    let empty = scene_from(&[], |_| vec![]);
    assert!(matches!(build_cell_graph(&empty, 3), Err(Error::EmptyScene)));
    let s = random_scene(1);
    let g = build_cell_graph(&s, 3).unwrap();
    assert!(matches!(neighbors(&g, s.n()), Err(Error::IndexOutOfRange { .. })));
    assert!(build_cell_graph(&s, 0).is_err());
}

#[test]
fn matches_brute_force_on_100_scenes() {
    for seed in 0..100 {
        let s = random_scene(seed);
        let k = 1 + seed as usize % 8;
        let g = build_cell_graph(&s, k).unwrap();
        let o = oracle(&s, k);
        for i in 0..s.n() {
            assert_eq!(neighbors(&g, i).unwrap(), o[i].as_slice(), "seed {seed} node {i}");
        }
    }
}

#[test]
fn small_random_scene_k2() {
    let s = scene_from(&[(10.0, 20.0), (200.0, 31.0), (90.0, 90.0), (91.0, 10.0), (5.0, 250.0)], |i| {
        (0..NUM_ATTRS).map(|a| ((i * 7 + a * 3) % 5) as f64).collect()
    });
    let g = build_cell_graph(&s, 2).unwrap();
    let o = oracle(&s, 2);
    for i in 0..5 {
        assert_eq!(neighbors(&g, i).unwrap(), o[i].as_slice());
    }
}

#[test]
fn ties_go_to_the_lower_id() {
    // 1 and 2 are equidistant from 0
    let s = scene_from(&[(50.0, 50.0), (60.0, 50.0), (40.0, 50.0)], |_| vec![1.0; NUM_ATTRS]);
    let g = build_cell_graph(&s, 1).unwrap();
    assert!(g.edges().contains(&(0, 1)));
}

#[test]
fn graph_json_has_edges() {
    let s = scene_from(&[(0.0, 5.0), (1.0, 5.0), (3.0, 5.0)], |_| vec![1.0; NUM_ATTRS]);
    let v: serde_json::Value = serde_json::from_str(&build_cell_graph(&s, 1).unwrap().to_json().unwrap()).unwrap();
    assert_eq!(v["n"], 3);
    assert_eq!(v["k"], 1);
    assert_eq!(v["edges"], serde_json::json!([[0, 1], [1, 2]]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn structural_invariants(seed in 0u64..100_000, k in 1usize..9) {
        let s = random_scene(seed);
        let g = build_cell_graph(&s, k).unwrap();
        for i in 0..s.n() {
            let nb = neighbors(&g, i).unwrap();
            prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!nb.contains(&i));
            prop_assert!(nb.len() >= k.min(s.n() - 1));
            for &j in nb {
                prop_assert!(neighbors(&g, j).unwrap().contains(&i));
            }
        }
    }

    #[test]
    fn edges_grow_with_k(seed in 0u64..100_000, k in 1usize..8) {
        let s = random_scene(seed);
        let a: BTreeSet<_> = build_cell_graph(&s, k).unwrap().edges().into_iter().collect();
        let b: BTreeSet<_> = build_cell_graph(&s, k + 1).unwrap().edges().into_iter().collect();
        prop_assert!(a.is_subset(&b));
    }

    #[test]
    fn relabeling_cells_relabels_the_graph(seed in 0u64..100_000, shift in 1usize..50) {
        let s = random_scene(seed);
        let n = s.n();
        // new position of old cell i is perm[i]
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        prop_assume!({ let u: BTreeSet<_> = perm.iter().collect(); u.len() == n });
        let mut t = s.clone();
        for (i, c) in s.cells.iter().enumerate() {
            t.cells[perm[i]] = Cell { id: perm[i], ..c.clone() };
        }
        let gs = build_cell_graph(&s, 4).unwrap();
        let gt = build_cell_graph(&t, 4).unwrap();
        // distances between distinct cells are almost surely distinct, so ties do not arise
        for i in 0..n {
            let mut mapped: Vec<usize> = neighbors(&gs, i).unwrap().iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(neighbors(&gt, perm[i]).unwrap(), mapped.as_slice());
        }
    }
}
