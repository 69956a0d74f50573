use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::report::{render_report, NUM_STYLES};
use super::stats::neighbor_counts;
use super::{attr, Cell, Grade, Scene, NUM_ATTRS};
use crate::error::{Error, Result};

/// Radius in pixels used for the per-cell crowding attribute.
pub const CROWDING_RADIUS: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: f64,
    pub height: f64,
    pub min_cells: usize,
    pub max_cells: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 256.0,
            height: 256.0,
            min_cells: 30,
            max_cells: 120,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.height.is_finite()) || self.width < 16.0 || self.height < 16.0 {
            return Err(Error::InvalidParams(format!(
                "scene size {}x{} must be finite and at least 16x16",
                self.width, self.height
            )));
        }
        if self.min_cells == 0 || self.min_cells > self.max_cells {
            return Err(Error::InvalidParams(format!(
                "cell range [{}, {}] must satisfy 1 <= min <= max",
                self.min_cells, self.max_cells
            )));
        }
        Ok(())
    }

    /// Cell-count range for a grade, as fractions of `[min_cells, max_cells]`.
    fn count_range(&self, grade: Grade) -> (usize, usize) {
        let (lo, hi) = match grade {
            Grade::NormalOrInsufficient => (0.0, 0.7),
            Grade::LowGrade | Grade::HighGrade => (0.3, 1.0),
        };
        let span = (self.max_cells - self.min_cells) as f64;
        let a = self.min_cells + (lo * span).round() as usize;
        let b = self.min_cells + (hi * span).round() as usize;
        (a, b.max(a))
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("positive standard deviation")
}

fn clamp_coord(v: f64, extent: f64) -> f64 {
    v.clamp(0.0, extent * (1.0 - 1e-9))
}

/// Jittered lattice positions.
fn lattice_layout(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<(f64, f64)> {
    let cols = ((n as f64 * w / h).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    let (sx, sy) = (w / cols as f64, h / rows as f64);
    let mut sites: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    sites.shuffle(rng);
    sites
        .into_iter()
        .take(n)
        .map(|(r, c)| {
            (
                clamp_coord((c as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * sx, w),
                clamp_coord((r as f64 + 0.5 + rng.gen_range(-0.25..0.25)) * sy, h),
            )
        })
        .collect()
}

/// Gaussian clusters around random centres. Returns placements and the
/// cluster of each cell (`None` for background scatter).
fn cluster_layout(
    rng: &mut ChaCha8Rng,
    n: usize,
    w: f64,
    h: f64,
    clusters: usize,
    sigma: f64,
    scatter: f64,
) -> Vec<(f64, f64, Option<usize>)> {
    // rejection sampling keeps cluster centres apart where possible
    let min_gap = 0.3 * w.min(h);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(clusters);
    for attempt in 0.. {
        if centers.len() == clusters {
            break;
        }
        let c = (rng.gen_range(0.15 * w..0.85 * w), rng.gen_range(0.15 * h..0.85 * h));
        let far = centers.iter().all(|&(x, y)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() >= min_gap);
        if far || attempt >= 64 * clusters {
            centers.push(c);
        }
    }
    let spread = normal(0.0, sigma * w.min(h));
    (0..n)
        .map(|i| {
            if rng.gen_bool(scatter) {
                return (rng.gen_range(0.0..w), rng.gen_range(0.0..h), None);
            }
            let (cx, cy) = centers[i % clusters];
            let x = clamp_coord(cx + spread.sample(rng), w);
            let y = clamp_coord(cy + spread.sample(rng), h);
            (x, y, Some(i % clusters))
        })
        .collect()
}

/// Per-phenotype attribute means: log area, eccentricity, irregularity,
/// chromatin, nucleolus and the long-axis orientation.
#[derive(Clone, Copy)]
struct Phenotype {
    log_area: f64,
    eccentricity: f64,
    irregularity: f64,
    chromatin: f64,
    nucleolus: f64,
    axis: f64,
}

/// Spread of phenotype means around the scene means.
const BETWEEN_SD: [f64; 5] = [0.30, 0.10, 0.07, 0.12, 0.12];
/// Spread of cells around their phenotype.
const WITHIN_SD: [f64; 5] = [0.07, 0.04, 0.03, 0.04, 0.05];
const AXIS_SD: f64 = 0.3;

fn draw_phenotype(rng: &mut ChaCha8Rng, mean: [f64; 5]) -> Phenotype {
    let d = |rng: &mut ChaCha8Rng, i: usize| normal(mean[i], BETWEEN_SD[i]).sample(rng);
    Phenotype {
        log_area: d(rng, 0),
        eccentricity: d(rng, 1),
        irregularity: d(rng, 2),
        chromatin: d(rng, 3),
        nucleolus: d(rng, 4),
        axis: rng.gen_range(0.0..PI),
    }
}

/// Scene-level attribute means and mitosis rate per grade.
fn grade_means(grade: Grade) -> ([f64; 5], f64) {
    let la = 60f64.ln();
    match grade {
        Grade::NormalOrInsufficient => ([la, 0.30, 0.10, 0.40, 0.20], 0.002),
        Grade::LowGrade => ([la, 0.38, 0.17, 0.55, 0.34], 0.010),
        Grade::HighGrade => ([la, 0.40, 0.22, 0.58, 0.38], 0.020),
    }
}

/// Deterministic synthetic scene for `(seed, grade, params)`.
pub fn generate_scene(seed: u64, grade: Grade, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(grade.index() as u64 + 1);
    let (w, h) = (params.width, params.height);
    let (lo, hi) = params.count_range(grade);
    let n = rng.gen_range(lo..=hi);

    let (mut mean, mitosis_rate) = grade_means(grade);
    // Scene-level offsets shared by all grades, so per-scene means overlap.
    let shift = normal(0.0, 1.0);
    mean[0] += 0.15 * shift.sample(&mut rng);
    for (i, s) in [(2, 0.04), (3, 0.06), (4, 0.06)] {
        mean[i] += s * shift.sample(&mut rng);
    }

    // (x, y, phenotype) per cell
    let (placed, phenotypes): (Vec<(f64, f64, usize)>, Vec<Phenotype>) = match grade {
        Grade::NormalOrInsufficient => {
            let mut p = draw_phenotype(&mut rng, mean);
            p.log_area = mean[0];
            let cells = lattice_layout(&mut rng, n, w, h);
            (cells.into_iter().map(|(x, y)| (x, y, 0)).collect(), vec![p])
        }
        Grade::LowGrade | Grade::HighGrade => {
            let k = rng.gen_range(2..=5);
            let sigma = rng.gen_range(0.05..0.10);
            let scatter = rng.gen_range(0.0..0.10);
            let layout = cluster_layout(&mut rng, n, w, h, k, sigma, scatter);
            let phen: Vec<Phenotype> = (0..k).map(|_| draw_phenotype(&mut rng, mean)).collect();
            let cells = layout
                .into_iter()
                .map(|(x, y, c)| {
                    let p = match (grade, c) {
                        (Grade::LowGrade, Some(c)) => c,
                        _ => rng.gen_range(0..k),
                    };
                    (x, y, p)
                })
                .collect();
            (cells, phen)
        }
    };

    let mitosis = Bernoulli::new(mitosis_rate).expect("rate in [0, 1]");
    let jitter: Vec<Normal<f64>> = WITHIN_SD.iter().map(|&sd| normal(0.0, sd)).collect();
    let axis_jitter = normal(0.0, AXIS_SD);

    let points: Vec<(f64, f64)> = placed.iter().map(|&(x, y, _)| (x, y)).collect();
    let crowd = neighbor_counts(&points, CROWDING_RADIUS);

    let cells = placed
        .iter()
        .enumerate()
        .map(|(id, &(x, y, p))| {
            let ph = phenotypes[p];
            let mut attrs = vec![0.0; NUM_ATTRS];
            attrs[attr::AREA] = (ph.log_area + jitter[0].sample(&mut rng)).exp();
            attrs[attr::ECCENTRICITY] = (ph.eccentricity + jitter[1].sample(&mut rng)).clamp(0.0, 0.99);
            attrs[attr::IRREGULARITY] = (ph.irregularity + jitter[2].sample(&mut rng)).clamp(0.0, 1.0);
            attrs[attr::CHROMATIN] = (ph.chromatin + jitter[3].sample(&mut rng)).clamp(0.0, 1.0);
            attrs[attr::NUCLEOLUS] = (ph.nucleolus + jitter[4].sample(&mut rng)).clamp(0.0, 1.0);
            attrs[attr::MITOSIS] = if mitosis.sample(&mut rng) { 1.0 } else { 0.0 };
            attrs[attr::CROWDING] = crowd[id] as f64 / 8.0;
            attrs[attr::POLARITY] = (2.0 * (ph.axis + axis_jitter.sample(&mut rng))).cos();
            Cell { id, x, y, attrs }
        })
        .collect();

    let mut scene = Scene {
        id: seed,
        width: w,
        height: h,
        grade,
        cells,
        reports: Vec::new(),
        seed,
    };
    scene.reports = (0..NUM_STYLES as u64).map(|v| render_report(&scene, v)).collect();
    Ok(scene)
}
