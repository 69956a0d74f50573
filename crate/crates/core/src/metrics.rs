//! Caption metrics (BLEU, ROUGE-L, CIDEr-D) and lesion classification scores.
//!
//! The caption metrics follow the coco-caption reference scorers: corpus
//! BLEU with closest reference length, ROUGE-L with beta 1.2, and CIDEr-D
//! with sigma 6 and a x10 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scene::Grade;

type Gram = Vec<String>;

fn lower(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram, usize> {
    let mut counts = HashMap::new();
    for k in 1..=n {
        for w in tokens.windows(k) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Cumulative corpus BLEU-1..n. `references[i]` holds the references of candidate `i`.
pub fn bleu_all(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Vec<f64> {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    assert!((1..=4).contains(&n), "n must be in 1..=4");
    const TINY: f64 = 1e-15;
    const SMALL: f64 = 1e-9;
    let mut guess = vec![0usize; n];
    let mut correct = vec![0usize; n];
    let (mut testlen, mut reflen) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        assert!(!refs.is_empty(), "every candidate needs a reference");
        let cand = lower(cand);
        let mut max_ref: HashMap<Gram, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(&lower(r), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let len = cand.len();
        testlen += len;
        reflen += refs
            .iter()
            .map(|r| (r.len().abs_diff(len), r.len()))
            .min()
            .map(|p| p.1)
            .unwrap_or(0);
        for k in 0..n {
            guess[k] += len.saturating_sub(k);
        }
        for (g, c) in ngram_counts(&cand, n) {
            correct[g.len() - 1] += c.min(max_ref.get(&g).copied().unwrap_or(0));
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut prod = 1.0;
    for k in 0..n {
        prod *= (correct[k] as f64 + TINY) / (guess[k] as f64 + SMALL);
        out.push(prod.powf(1.0 / (k + 1) as f64));
    }
    let ratio = (testlen as f64 + TINY) / (reflen as f64 + SMALL);
    if ratio < 1.0 {
        let bp = (1.0 - 1.0 / ratio).exp();
        for b in &mut out {
            *b *= bp;
        }
    }
    out
}

/// Cumulative corpus BLEU-n in [0, 1].
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> f64 {
    bleu_all(candidates, references, n)[n - 1]
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: F-measure from the best precision and best recall over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let cand = lower(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in references {
        let r = lower(r);
        if r.is_empty() {
            continue;
        }
        let l = lcs(&cand, &r) as f64;
        p_max = p_max.max(l / cand.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Corpus ROUGE-L: mean of sentence scores.
pub fn rouge_l_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / candidates.len() as f64
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_N: usize = 4;

struct TfIdf {
    vec: [HashMap<Gram, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    /// Number of bigrams, as in the reference scorer.
    length: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Gram, usize>, ref_len: f64) -> TfIdf {
    let mut vec: [HashMap<Gram, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for (g, tf) in ngram_counts(tokens, CIDER_N) {
        let k = g.len() - 1;
        let d = (df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
        let v = tf as f64 * (ref_len - d);
        norm[k] += v * v;
        if k == 1 {
            length += tf as f64;
        }
        vec[k].insert(g, v);
    }
    for x in &mut norm {
        *x = x.sqrt();
    }
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let mut total = 0.0;
    for k in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[k] {
            let rv = r.vec[k].get(g).copied().unwrap_or(0.0);
            val += hv.min(rv) * rv;
        }
        if h.norm[k] != 0.0 && r.norm[k] != 0.0 {
            val /= h.norm[k] * r.norm[k];
        }
        total += val * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    }
    total / CIDER_N as f64
}

/// Corpus CIDEr-D. Document frequencies come from the reference sets, one
/// document per candidate. A single-candidate corpus scores 0.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    if candidates.len() < 2 {
        log::warn!("CIDEr on a corpus of {} image(s): idf is zero, score is 0", candidates.len());
        return 0.0;
    }
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|rs| rs.iter().map(|r| lower(r)).collect()).collect();
    let mut df: HashMap<Gram, usize> = HashMap::new();
    for rs in &refs {
        let mut seen: std::collections::HashSet<Gram> = std::collections::HashSet::new();
        for r in rs {
            seen.extend(ngram_counts(r, CIDER_N).into_keys());
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let ref_len = (candidates.len() as f64).ln();
    let mut total = 0.0;
    for (cand, rs) in candidates.iter().zip(&refs) {
        let h = tfidf(&lower(cand), &df, ref_len);
        let s: f64 = rs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, ref_len))).sum();
        total += s / rs.len() as f64 * 10.0;
    }
    total / candidates.len() as f64
}

/// Grade named by the last "high grade" / "low grade" in the report;
/// anything else is the merged normal class.
pub fn extract_conclusion(tokens: &[String]) -> Grade {
    let toks = lower(tokens);
    let mut found = Grade::NormalOrInsufficient;
    for w in toks.windows(2) {
        if w[1] == "grade" {
            match w[0].as_str() {
                "high" => found = Grade::HighGrade,
                "low" => found = Grade::LowGrade,
                _ => {}
            }
        }
    }
    found
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub accuracy: f64,
    /// Mean F1 over classes with non-zero support.
    pub macro_f1: f64,
    /// One-vs-rest F1 in `Grade::ALL` order.
    pub per_class_f1: [f64; 3],
    /// `confusion[gold][pred]`.
    pub confusion: [[usize; 3]; 3],
}

pub fn classification_metrics(predicted: &[Grade], gold: &[Grade]) -> ClassScores {
    assert_eq!(predicted.len(), gold.len(), "prediction count differs from gold count");
    let mut confusion = [[0usize; 3]; 3];
    for (&p, &g) in predicted.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
    }
    let n = gold.len();
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = [0.0; 3];
    let mut f1_sum = 0.0;
    let mut counted = 0;
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let support: usize = confusion[c].iter().sum();
        let predicted_c: usize = (0..3).map(|g| confusion[g][c]).sum();
        let denom = (support + predicted_c) as f64;
        per_class_f1[c] = if tp > 0.0 { 2.0 * tp / denom } else { 0.0 };
        if support > 0 {
            f1_sum += per_class_f1[c];
            counted += 1;
        }
    }
    ClassScores {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        macro_f1: if counted == 0 { 0.0 } else { f1_sum / counted as f64 },
        per_class_f1,
        confusion,
    }
}

/// Corpus evaluation with every score scaled by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub f1_high: f64,
    pub f1_low: f64,
    pub f1_normal: f64,
    pub confusion: [[usize; 3]; 3],
    pub n: usize,
}

impl EvalReport {
    /// Scores generated reports against references; gold labels come from
    /// the references' own conclusions.
    pub fn compute(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Self {
        let b = bleu_all(candidates, references, 4);
        let predicted: Vec<Grade> = candidates.iter().map(|c| extract_conclusion(c)).collect();
        let gold: Vec<Grade> = references.iter().map(|r| extract_conclusion(&r[0])).collect();
        let cls = classification_metrics(&predicted, &gold);
        Self {
            bleu1: 100.0 * b[0],
            bleu2: 100.0 * b[1],
            bleu3: 100.0 * b[2],
            bleu4: 100.0 * b[3],
            rouge_l: 100.0 * rouge_l_corpus(candidates, references),
            cider: 100.0 * cider(candidates, references),
            accuracy: 100.0 * cls.accuracy,
            macro_f1: 100.0 * cls.macro_f1,
            f1_high: 100.0 * cls.per_class_f1[0],
            f1_low: 100.0 * cls.per_class_f1[1],
            f1_normal: 100.0 * cls.per_class_f1[2],
            confusion: cls.confusion,
            n: candidates.len(),
        }
    }

    /// Named scalar fields, in a fixed order, for tables.
    pub const FIELD_NAMES: [&'static str; 11] = [
        "bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider", "accuracy", "macro_f1", "f1_high", "f1_low", "f1_normal",
    ];

    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rougeL", self.rouge_l),
            ("cider", self.cider),
            ("accuracy", self.accuracy),
            ("macro_f1", self.macro_f1),
            ("f1_high", self.f1_high),
            ("f1_low", self.f1_low),
            ("f1_normal", self.f1_normal),
        ]
    }
}
