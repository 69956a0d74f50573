use crate::scene::{Scene, NUM_ATTRS};

/// Grid cells per axis.
pub const GRID: usize = 16;
/// Density plus one mean per attribute.
pub const CHANNELS: usize = NUM_ATTRS + 1;
/// Divisor applied to per-grid-cell counts.
const DENSITY_SCALE: f64 = 2.0;

pub(crate) fn grid_index(v: f64, extent: f64) -> usize {
    ((v / extent * GRID as f64).floor().max(0.0) as usize).min(GRID - 1)
}

/// `[GRID·GRID × CHANNELS]` row-major raster of cell density and mean
/// (already standardized) attributes. Empty grid cells stay zero.
pub fn rasterize(scene: &Scene, attrs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; GRID * GRID * CHANNELS];
    let mut counts = vec![0usize; GRID * GRID];
    for (cell, a) in scene.cells.iter().zip(attrs) {
        let g = grid_index(cell.y, scene.height) * GRID + grid_index(cell.x, scene.width);
        counts[g] += 1;
        for (k, &v) in a.iter().enumerate() {
            out[g * CHANNELS + 1 + k] += v;
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        if c > 0 {
            let row = &mut out[g * CHANNELS..(g + 1) * CHANNELS];
            for v in &mut row[1..] {
                *v /= c as f64;
            }
            row[0] = c as f64 / DENSITY_SCALE;
        }
    }
    out
}
