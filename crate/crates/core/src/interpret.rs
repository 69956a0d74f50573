//! Per-cell importance for a generated token by gradient-weighted attention
//! relevance (Chefer et al., 2021, encoder-decoder rules), plus SVG overlays.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{SceneInput, Variant};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::scene::{attr, Scene, Vocabulary, BOS};
use crate::tensor::{kernels, AttnKind, Tape, Tensor};

/// One attention op with its probabilities and `dL/dP`, both `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub kind: AttnKind,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub probs: Vec<f64>,
    pub grads: Vec<f64>,
}

/// `Ā = mean_h (∇A ⊙ A)⁺` as a `[queries × keys]` matrix.
pub fn head_mean_relevance(layer: &LayerAttention) -> Tensor<f64> {
    let (q, k) = (layer.queries, layer.keys);
    let mut out = vec![0.0; q * k];
    for h in 0..layer.heads {
        let base = h * q * k;
        for (i, o) in out.iter_mut().enumerate() {
            *o += (layer.grads[base + i] * layer.probs[base + i]).max(0.0);
        }
    }
    for o in &mut out {
        *o /= layer.heads as f64;
    }
    Tensor::from_vec(&[q, k], out).expect("shape matches")
}

/// `row_normalize(R − I) + I`; rows of `R − I` summing to zero stay zero.
pub fn normalize_residual(r: &Tensor<f64>) -> Tensor<f64> {
    let n = r.rows();
    let mut out = r.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        row[i] -= 1.0;
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        row[i] += 1.0;
    }
    out
}

fn mm(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    kernels::matmul(a, false, b, false)
}

/// Decoder-to-encoder relevance `R^{de}` (`[n_dec × n_enc]`) from attention
/// ops listed in execution order.
pub fn propagate(layers: &[LayerAttention], n_enc: usize, n_dec: usize) -> Result<Tensor<f64>> {
    let mut r_ee = Tensor::identity(n_enc);
    let mut r_dd = Tensor::identity(n_dec);
    let mut r_de = Tensor::zeros(&[n_dec, n_enc]);
    for layer in layers {
        let a = head_mean_relevance(layer);
        let expect = match layer.kind {
            AttnKind::EncoderSelf => (n_enc, n_enc),
            AttnKind::DecoderSelf => (n_dec, n_dec),
            AttnKind::DecoderCross => (n_dec, n_enc),
        };
        if (layer.queries, layer.keys) != expect {
            return Err(Error::shape(
                "propagate",
                format!("{:?} attention is {}x{}, expected {:?}", layer.kind, layer.queries, layer.keys, expect),
            ));
        }
        match layer.kind {
            AttnKind::EncoderSelf => r_ee.add_assign(&mm(&a, &r_ee)?),
            AttnKind::DecoderSelf => {
                r_de.add_assign(&mm(&a, &r_de)?);
                r_dd.add_assign(&mm(&a, &r_dd)?);
            }
            AttnKind::DecoderCross => {
                let dd = normalize_residual(&r_dd);
                let ee = normalize_residual(&r_ee);
                let t = kernels::matmul(&dd, true, &a, false)?;
                r_de.add_assign(&mm(&t, &ee)?);
            }
        }
    }
    Ok(r_de)
}

/// Min-max scaling to [0, 1]; a constant input maps to all ones.
pub fn standardize(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max <= min {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| (v - min) / (max - min)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub scene_id: u64,
    /// Index into the generated report (BOS excluded).
    pub target_pos: usize,
    pub token: String,
    /// Standardized score per cell, in cell order.
    pub scores: Vec<f64>,
    pub raw: Vec<f64>,
}

/// Position of the conclusion keyword: the last "high"/"low" before
/// "grade", else the last "normal"/"insufficient", else the last token.
pub fn conclusion_position(report: &[String]) -> Option<usize> {
    let grade = (0..report.len().saturating_sub(1))
        .rev()
        .find(|&i| (report[i] == "high" || report[i] == "low") && report[i + 1] == "grade");
    grade
        .or_else(|| report.iter().rposition(|t| t == "normal" || t == "insufficient"))
        .or_else(|| report.len().checked_sub(1))
}

/// Relevance of each cell token for predicting `report[target_pos]`.
pub fn importance<T: Scalar>(
    model: &Model<T>,
    input: &SceneInput,
    report: &[usize],
    target_pos: usize,
) -> Result<Vec<f64>> {
    if model.config.variant == Variant::NoGraph {
        return Err(Error::InvalidConfig("importance maps need cell tokens; no-graph uses grid tokens".into()));
    }
    if target_pos >= report.len() {
        return Err(Error::IndexOutOfRange {
            index: target_pos,
            len: report.len(),
        });
    }
    let mut prefix = Vec::with_capacity(target_pos + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(&report[..target_pos]);

    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, input)?;
    let logits = model
        .transformer
        .decode_logits(&mut tape, &model.params, enc.memory, &enc.sequence.valid, &prefix)?;
    let vocab = tape.value(logits).cols();
    let target = tape.element(logits, target_pos * vocab + report[target_pos])?;
    let grads = tape.backward(target)?;

    let layers: Vec<LayerAttention> = tape
        .attention_probs()
        .into_iter()
        .map(|a| LayerAttention {
            kind: a.tag.kind,
            heads: a.heads,
            queries: a.queries,
            keys: a.keys,
            probs: a.probs.iter().map(|v| v.to_f64_lossy()).collect(),
            grads: grads
                .attention_dprobs(a.var)
                .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; a.probs.len()]),
        })
        .collect();
    let r_de = propagate(&layers, enc.sequence.len(), prefix.len())?;
    let row = r_de.row(target_pos);
    let off = enc.sequence.cell_offset;
    Ok(row[off..off + enc.sequence.cell_tokens].to_vec())
}

/// Importance map for the generated report; `target_pos` defaults to the conclusion keyword.
pub fn importance_map<T: Scalar>(
    model: &Model<T>,
    scene: &Scene,
    input: &SceneInput,
    vocab: &Vocabulary,
    target_pos: Option<usize>,
) -> Result<(ImportanceMap, Vec<String>)> {
    let ids = model.generate(input, model.config.max_len)?;
    let words = vocab.decode(&ids);
    let pos = match target_pos {
        Some(p) => p,
        None => conclusion_position(&words).ok_or_else(|| Error::InvalidParams("generated report is empty".into()))?,
    };
    if !words.iter().any(|w| w == "grade" || w == "normal" || w == "insufficient") {
        log::warn!("generated report has no conclusion; the model may be untrained and scores meaningless");
    }
    let raw = importance(model, input, &ids, pos)?;
    Ok((
        ImportanceMap {
            scene_id: scene.id,
            target_pos: pos,
            token: words.get(pos).cloned().unwrap_or_default(),
            scores: standardize(&raw),
            raw,
        },
        words,
    ))
}

/// Viridis control points; luminance rises monotonically from 0 to 1.
pub const COLORMAP: [(u8, u8, u8); 5] = [
    (0x44, 0x01, 0x54),
    (0x3b, 0x52, 0x8b),
    (0x21, 0x91, 0x8c),
    (0x5e, 0xc9, 0x62),
    (0xfd, 0xe7, 0x25),
];

/// Hex colour for `v ∈ [0, 1]` by linear interpolation between control points.
pub fn colormap(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let x = v * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let t = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    let lerp = |p: u8, q: u8| (p as f64 + (q as f64 - p as f64) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

pub fn overlay_svg(scene: &Scene, map: &ImportanceMap) -> Result<String> {
    if map.scores.len() != scene.n() {
        return Err(Error::shape(
            "overlay",
            format!("{} scores for {} cells", map.scores.len(), scene.n()),
        ));
    }
    let (w, h) = (scene.width, scene.height);
    let bar_x = w + 16.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        w + 64.0,
        h,
        w + 64.0,
        h
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="#ffffff" stroke="#000000"/>"##);
    for (cell, &score) in scene.cells.iter().zip(&map.scores) {
        let r = (cell.attrs[attr::AREA] / std::f64::consts::PI).sqrt().clamp(2.0, 8.0);
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{}" stroke="#333333" stroke-width="0.5"/>"##,
            cell.x,
            cell.y,
            r,
            colormap(score)
        );
    }
    let _ = writeln!(s, r#"<defs><linearGradient id="bar" x1="0" y1="1" x2="0" y2="0">"#);
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(s, r#"<stop offset="{v:.1}" stop-color="{}"/>"#, colormap(v));
    }
    let _ = writeln!(s, "</linearGradient></defs>");
    let top = 16.0;
    let height = h - 32.0;
    let _ = writeln!(
        s,
        r##"<rect x="{bar_x:.0}" y="{top:.0}" width="12" height="{height:.0}" fill="url(#bar)" stroke="#000000"/>"##
    );
    let _ = writeln!(s, r#"<text x="{:.0}" y="{:.0}" font-size="10">1</text>"#, bar_x + 16.0, top + 8.0);
    let _ = writeln!(s, r#"<text x="{:.0}" y="{:.0}" font-size="10">0</text>"#, bar_x + 16.0, top + height);
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.0}" font-size="10">{}</text>"#,
        h - 4.0,
        escape(&format!("scene {} token {:?} (position {})", map.scene_id, map.token, map.target_pos))
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes the SVG overlay to `path` and the map to `path` with a `.json` extension.
pub fn render_overlay(scene: &Scene, map: &ImportanceMap, path: &Path) -> Result<()> {
    let svg = overlay_svg(scene, map)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(map)?).map_err(|e| Error::io(&sidecar, e))
}
