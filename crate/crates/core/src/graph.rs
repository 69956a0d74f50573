//! kNN cell graphs over standardized attributes joined with scaled coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Scene, NUM_ATTRS};

/// Default multiplier on [0, 1] coordinates inside the kNN embedding.
pub const DEFAULT_COORD_WEIGHT: f64 = 128.0;

/// Per-attribute z-score fitted over a set of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for AttributeScaler {
    fn default() -> Self {
        Self {
            mean: vec![0.0; NUM_ATTRS],
            std: vec![1.0; NUM_ATTRS],
        }
    }
}

impl AttributeScaler {
    /// Population mean and std over every cell; a zero std becomes 1.
    pub fn fit<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; NUM_ATTRS];
        let mut sq = [0.0; NUM_ATTRS];
        for scene in scenes {
            for cell in &scene.cells {
                count += 1;
                for (a, &v) in cell.attrs.iter().enumerate() {
                    sum[a] += v;
                    sq[a] += v * v;
                }
            }
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, attrs: &[f64]) -> Vec<f64> {
        attrs
            .iter()
            .enumerate()
            .map(|(a, &v)| (v - self.mean[a]) / self.std[a])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGraph {
    pub n: usize,
    pub k: usize,
    /// Sorted, symmetric neighbour lists without self-loops.
    pub adjacency: Vec<Vec<usize>>,
    /// Centroids divided by the scene size.
    pub coords: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct GraphDump<'a> {
    n: usize,
    k: usize,
    edges: &'a [(usize, usize)],
}

impl CellGraph {
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange { index: i, len: self.n })
    }

    /// Undirected edges `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, adj)| adj.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(&GraphDump {
            n: self.n,
            k: self.k,
            edges: &self.edges(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphBuilder {
    pub k: usize,
    pub coord_weight: f64,
    pub scaler: AttributeScaler,
}

impl GraphBuilder {
    pub fn new(k: usize, coord_weight: f64, scaler: AttributeScaler) -> Self {
        Self { k, coord_weight, scaler }
    }

    /// Builder with a scaler fitted on `scene` alone.
    pub fn for_scene(scene: &Scene, k: usize) -> Self {
        Self::new(k, DEFAULT_COORD_WEIGHT, AttributeScaler::fit([scene]))
    }

    /// Rows of `[z-scored attributes ‖ coord_weight · normalized coords]`.
    pub fn embeddings(&self, scene: &Scene) -> Vec<Vec<f64>> {
        scene
            .cells
            .iter()
            .map(|c| {
                let mut e = self.scaler.transform(&c.attrs);
                e.push(self.coord_weight * c.x / scene.width);
                e.push(self.coord_weight * c.y / scene.height);
                e
            })
            .collect()
    }

    pub fn build(&self, scene: &Scene) -> Result<CellGraph> {
        if scene.cells.is_empty() {
            return Err(Error::EmptyScene);
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let emb = self.embeddings(scene);
        let coords = scene
            .cells
            .iter()
            .map(|c| (c.x / scene.width, c.y / scene.height))
            .collect();
        Ok(knn_graph(&emb, self.k, coords))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Directed kNN (ties to the lower id), symmetrized by union.
fn knn_graph(emb: &[Vec<f64>], k: usize, coords: Vec<(f64, f64)>) -> CellGraph {
    let n = emb.len();
    let take = k.min(n.saturating_sub(1));
    let mut adjacency = vec![Vec::new(); n];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(&emb[i], &emb[j]), j)));
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &cand[..take] {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }
    CellGraph { n, k, adjacency, coords }
}

/// Graph with a scaler fitted on the scene itself and the default coordinate weight.
pub fn build_cell_graph(scene: &Scene, k: usize) -> Result<CellGraph> {
    GraphBuilder::for_scene(scene, k).build(scene)
}

pub fn neighbors(g: &CellGraph, i: usize) -> Result<&[usize]> {
    g.neighbors(i)
}
