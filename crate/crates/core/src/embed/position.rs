use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Quantization bins per coordinate axis.
pub const POS_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    Sine,
    Learned,
    None,
}

impl std::str::FromStr for PeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sine" => Ok(PeMode::Sine),
            "learned" => Ok(PeMode::Learned),
            "none" => Ok(PeMode::None),
            other => Err(format!("unknown position mode {other:?} (sine, learned, none)")),
        }
    }
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeMode::Sine => "sine",
            PeMode::Learned => "learned",
            PeMode::None => "none",
        })
    }
}

/// Bin of a coordinate already normalized to [0, 1].
pub fn quantize(v: f64) -> usize {
    ((v * POS_BINS as f64).floor().max(0.0) as usize).min(POS_BINS - 1)
}

/// Standard sin/cos ladder of width `dim` for integer position `pos`.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Row bins fill the first `d/2` dims, column bins the last `d/2`.
pub fn sine_position_embedding<T: Scalar>(row_bins: &[usize], col_bins: &[usize], d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = Vec::with_capacity(row_bins.len() * d);
    for (&r, &c) in row_bins.iter().zip(col_bins) {
        data.extend(sinusoid(r, half).into_iter().map(T::of));
        data.extend(sinusoid(c, d - half).into_iter().map(T::of));
    }
    Tensor::from_vec(&[row_bins.len(), d], data).expect("shape matches")
}
