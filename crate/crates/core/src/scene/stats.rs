//! Scene-level statistics that drive the report's degree words.

use super::{attr, Scene};

/// Spatial neighbours per cell for the local statistics.
pub const LOCAL_NEIGHBORS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStats {
    pub n: usize,
    /// Mean absolute log-area difference between spatial neighbours plus
    /// mean boundary irregularity.
    pub pleomorphism: f64,
    /// Mean distance to the nearest other cell, in pixels.
    pub nn_distance: f64,
    /// Mean agreement of orientation codes across spatial neighbours, in [0, 1].
    pub polarity: f64,
    pub mitoses: usize,
    pub nucleoli: f64,
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Indices of the `k` nearest cells by pixel distance (ties → lower index).
pub(crate) fn spatial_knn(points: &[(f64, f64)], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &p)| (dist2(points[i], p), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.truncate(k);
    others.into_iter().map(|(_, j)| j).collect()
}

/// Number of other cells within `radius` pixels of each cell.
pub(crate) fn neighbor_counts(points: &[(f64, f64)], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..points.len())
        .map(|i| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, &p)| j != i && dist2(points[i], p) <= r2)
                .count()
        })
        .collect()
}

impl SceneStats {
    pub fn compute(scene: &Scene) -> Self {
        let n = scene.n();
        let points: Vec<(f64, f64)> = scene.cells.iter().map(|c| (c.x, c.y)).collect();
        let col = |a: usize| scene.cells.iter().map(move |c| c.attrs[a]);
        let mean = |a: usize| if n == 0 { 0.0 } else { col(a).sum::<f64>() / n as f64 };

        let knn: Vec<Vec<usize>> = (0..n).map(|i| spatial_knn(&points, i, LOCAL_NEIGHBORS)).collect();
        let local_mean = |f: &dyn Fn(usize, usize) -> f64| {
            if n < 2 {
                return 0.0;
            }
            (0..n)
                .map(|i| knn[i].iter().map(|&j| f(i, j)).sum::<f64>() / knn[i].len() as f64)
                .sum::<f64>()
                / n as f64
        };

        let log_area: Vec<f64> = col(attr::AREA).map(|a| a.max(1e-9).ln()).collect();
        let pleomorphism = local_mean(&|i, j| (log_area[i] - log_area[j]).abs()) + mean(attr::IRREGULARITY);

        let nn_distance = if n < 2 {
            scene.width.max(scene.height)
        } else {
            (0..n)
                .map(|i| dist2(points[i], points[knn[i][0]]).sqrt())
                .sum::<f64>()
                / n as f64
        };

        let codes: Vec<f64> = col(attr::POLARITY).collect();
        let polarity = if n < 2 {
            1.0
        } else {
            local_mean(&|i, j| 1.0 - (codes[i] - codes[j]).abs() / 2.0)
        };

        let mitoses = col(attr::MITOSIS).filter(|&m| m > 0.5).count();
        SceneStats {
            n,
            pleomorphism,
            nn_distance,
            polarity,
            mitoses,
            nucleoli: mean(attr::NUCLEOLUS),
        }
    }
}
