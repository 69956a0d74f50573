//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use gnnformer::embed::SceneInput;
use gnnformer::interpret::LayerAttention;
use gnnformer::nn::Mlp2;
use gnnformer::scene::{Cell, Scene, BOS, NUM_ATTRS};
use gnnformer::tensor::{AttnKind, ParamStore, Tape, Tensor};
use gnnformer::Model64;

pub type Mat = Vec<Vec<f64>>;

/// Brute-force kNN: per-scene z-scores, full distance matrix, stable sort by
/// (distance, id), union symmetrization.
pub fn knn_oracle(scene: &Scene, k: usize, coord_weight: f64) -> Vec<Vec<usize>> {
    let n = scene.n();
    let f = NUM_ATTRS;
    let mut mean = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for c in &scene.cells {
        for a in 0..f {
            mean[a] += c.attrs[a] / n as f64;
        }
    }
    for c in &scene.cells {
        for a in 0..f {
            sd[a] += (c.attrs[a] - mean[a]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() <= 1e-12 { 1.0 } else { v.sqrt() }).collect();
    let emb: Mat = scene
        .cells
        .iter()
        .map(|c| {
            let mut e: Vec<f64> = (0..f).map(|a| (c.attrs[a] - mean[a]) / sd[a]).collect();
            e.push(coord_weight * c.x / scene.width);
            e.push(coord_weight * c.y / scene.height);
            e
        })
        .collect();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    let mut adj = vec![BTreeSet::new(); n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap().then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

pub fn naive_mlp(store: &ParamStore<f64>, mlp: &Mlp2, x: &[f64]) -> Vec<f64> {
    let lin = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
        let (din, dout) = (w.rows(), w.cols());
        (0..dout)
            .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.get2(i, o)).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = lin(store.get(mlp.l1.w), store.get(mlp.l1.b), x).into_iter().map(|v| v.max(0.0)).collect();
    lin(store.get(mlp.l2.w), store.get(mlp.l2.b), &h)
}

/// One GIN layer node by node over row-major `h` of width `d`.
pub fn naive_gin_layer(store: &ParamStore<f64>, mlp: &Mlp2, eps: f64, h: &[f64], d: usize, nb: &[Vec<usize>]) -> Mat {
    (0..nb.len())
        .map(|i| {
            let mut z: Vec<f64> = (0..d).map(|c| (1.0 + eps) * h[i * d + c]).collect();
            if !nb[i].is_empty() {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += nb[i].iter().map(|&j| h[j * d + c]).sum::<f64>() / nb[i].len() as f64;
                }
            }
            naive_mlp(store, mlp, &z)
        })
        .collect()
}

fn eye(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &mut Mat, b: &Mat) {
    for (r, s) in a.iter_mut().zip(b) {
        for (x, y) in r.iter_mut().zip(s) {
            *x += y;
        }
    }
}

/// Straight-line transcription of the relevance rules on nested vectors.
pub fn naive_relevance(layers: &[LayerAttention], n_enc: usize, n_dec: usize) -> Mat {
    let mut r_ee = eye(n_enc);
    let mut r_dd = eye(n_dec);
    let mut r_de = vec![vec![0.0; n_enc]; n_dec];
    let bar = |r: &Mat| -> Mat {
        let n = r.len();
        let mut out = r.clone();
        for i in 0..n {
            out[i][i] -= 1.0;
            let s: f64 = out[i].iter().sum();
            if s != 0.0 {
                for v in &mut out[i] {
                    *v /= s;
                }
            }
            out[i][i] += 1.0;
        }
        out
    };
    for l in layers {
        let mut a = vec![vec![0.0; l.keys]; l.queries];
        for h in 0..l.heads {
            for q in 0..l.queries {
                for k in 0..l.keys {
                    let i = (h * l.queries + q) * l.keys + k;
                    a[q][k] += f64::max(l.grads[i] * l.probs[i], 0.0) / l.heads as f64;
                }
            }
        }
        match l.kind {
            AttnKind::EncoderSelf => {
                let d = matmul(&a, &r_ee);
                add(&mut r_ee, &d);
            }
            AttnKind::DecoderSelf => {
                let d = matmul(&a, &r_de);
                add(&mut r_de, &d);
                let d = matmul(&a, &r_dd);
                add(&mut r_dd, &d);
            }
            AttnKind::DecoderCross => {
                let d = matmul(&matmul(&transpose(&bar(&r_dd)), &a), &bar(&r_ee));
                add(&mut r_de, &d);
            }
        }
    }
    r_de
}

/// Naive cell importance for the token at `pos`, built from raw tape
/// attention and gradients.
pub fn naive_importance(model: &Model64, input: &SceneInput, report: &[usize], pos: usize) -> Vec<f64> {
    let mut prefix = vec![BOS];
    prefix.extend(&report[..pos]);
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, input).unwrap();
    let logits = model
        .transformer
        .decode_logits(&mut tape, &model.params, enc.memory, &enc.sequence.valid, &prefix)
        .unwrap();
    let v = tape.value(logits).cols();
    let target = tape.element(logits, pos * v + report[pos]).unwrap();
    let grads = tape.backward(target).unwrap();
    let layers: Vec<LayerAttention> = tape
        .attention_probs()
        .into_iter()
        .map(|a| LayerAttention {
            kind: a.tag.kind,
            heads: a.heads,
            queries: a.queries,
            keys: a.keys,
            probs: a.probs.to_vec(),
            grads: grads.attention_dprobs(a.var).unwrap().to_vec(),
        })
        .collect();
    let off = enc.sequence.cell_offset;
    naive_relevance(&layers, enc.sequence.len(), prefix.len())[pos][off..off + input.n].to_vec()
}

/// Scene with cell `i` moved to slot `perm[i]`.
pub fn permute_scene(s: &Scene, perm: &[usize]) -> Scene {
    let mut t = s.clone();
    for (i, c) in s.cells.iter().enumerate() {
        t.cells[perm[i]] = Cell { id: perm[i], ..c.clone() };
    }
    t
}

/// Model input with cell `i` moved to slot `perm[i]` and the graph relabelled.
pub fn permute_input(input: &SceneInput, perm: &[usize]) -> SceneInput {
    let mut out = input.clone();
    for i in 0..input.n {
        out.attrs[perm[i]] = input.attrs[i].clone();
        out.row_bins[perm[i]] = input.row_bins[i];
        out.col_bins[perm[i]] = input.col_bins[i];
        let mut nb: Vec<usize> = input.neighbors[i].iter().map(|&j| perm[j]).collect();
        nb.sort_unstable();
        out.neighbors[perm[i]] = nb;
    }
    out
}
