use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{AttnKind, Tape};

/// One head's attention matrix, rows are queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub module: String,
    pub layer: usize,
    pub head: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub matrix: Vec<Vec<f64>>,
}

/// Every tagged attention matrix retained on a tape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub matrices: Vec<AttentionMatrix>,
}

impl AttentionRecord {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>) -> Self {
        let mut matrices = Vec::new();
        for a in tape.attention_probs() {
            let (module, kind) = match a.tag.kind {
                AttnKind::EncoderSelf => ("encoder", "self"),
                AttnKind::DecoderSelf => ("decoder", "self"),
                AttnKind::DecoderCross => ("decoder", "cross"),
            };
            for h in 0..a.heads {
                let block = &a.probs[h * a.queries * a.keys..(h + 1) * a.queries * a.keys];
                matrices.push(AttentionMatrix {
                    module: module.into(),
                    layer: a.tag.layer,
                    head: h,
                    kind: kind.into(),
                    matrix: block
                        .chunks(a.keys)
                        .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
                        .collect(),
                });
            }
        }
        Self { matrices }
    }
}
