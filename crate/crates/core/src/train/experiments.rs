use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, Experiment, TrainConfig};
use crate::embed::{PeMode, Variant};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::scalar::Scalar;
use crate::scene::dataset::Dataset;

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test-split reports, one per seed.
    pub runs: Vec<EvalReport>,
    pub val_bleu4: Vec<f64>,
    /// `(metric, mean ± std)` over seeds, ×100.
    pub summary: Vec<(String, MeanStd)>,
}

impl AblationRow {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.fields().iter().find(|(n, _)| *n == name).map(|(_, v)| *v))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Markdown table of `mean ± std` per metric.
    pub fn to_markdown(&self) -> String {
        let names = EvalReport::FIELD_NAMES;
        let mut s = String::from("| variant |");
        for n in &names {
            let _ = write!(s, " {n} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(names.len()));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.variant);
            for n in &names {
                let m = row.metric(n).unwrap_or(MeanStd { mean: 0.0, std: 0.0 });
                let _ = write!(s, " {:.2} ± {:.2} |", m.mean, m.std);
            }
            s.push('\n');
        }
        s
    }
}

fn summarize(runs: &[EvalReport]) -> Vec<(String, MeanStd)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .fields()
        .iter()
        .map(|(name, _)| {
            let xs: Vec<f64> = runs
                .iter()
                .map(|r| r.fields().iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap_or(0.0))
                .collect();
            (name.to_string(), MeanStd::of(&xs))
        })
        .collect()
}

/// Trains every variant once per seed and scores the selected checkpoint on the test split.
pub fn run_ablation_suite<T: Scalar>(
    dataset: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let exp = Experiment::new(dataset, base.k, base.coord_weight)?;
    let mut rows = Vec::new();
    for &variant in variants {
        let mut runs = Vec::new();
        let mut val = Vec::new();
        for &seed in seeds {
            let config = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let dir = out_dir.map(|d| d.join(format!("{variant}-seed{seed}")));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let outcome = train::<T>(&config, &exp, dir.as_deref())?;
            let (report, _) = evaluate(&outcome.model, &exp.test, &exp.vocab, config.max_len)?;
            log::info!(
                "{variant} seed {seed}: val bleu4 {:.4}, test bleu4 {:.2}, macro-F1 {:.2}",
                outcome.best_val_bleu4,
                report.bleu4,
                report.macro_f1
            );
            val.push(outcome.best_val_bleu4);
            runs.push(report);
        }
        rows.push(AblationRow {
            variant,
            summary: summarize(&runs),
            runs,
            val_bleu4: val,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    GnnLayers,
    EncLayers,
    DecLayers,
    PeMode,
    EncoderWidth,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "k" => Ok(SweepParam::K),
            "gnn_layers" => Ok(SweepParam::GnnLayers),
            "enc_layers" => Ok(SweepParam::EncLayers),
            "dec_layers" => Ok(SweepParam::DecLayers),
            "pe_mode" => Ok(SweepParam::PeMode),
            "encoder_width" => Ok(SweepParam::EncoderWidth),
            other => Err(format!(
                "unknown sweep parameter {other:?} (k, gnn_layers, enc_layers, dec_layers, pe_mode, encoder_width)"
            )),
        }
    }
}

impl SweepParam {
    /// Copy of `base` with this parameter set from its textual value.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut c = base.clone();
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("sweep value {value:?} is not a positive integer")))
        };
        match self {
            SweepParam::K => c.k = int()?,
            SweepParam::GnnLayers => c.gnn_layers = int()?,
            SweepParam::EncLayers => c.enc_layers = int()?,
            SweepParam::DecLayers => c.dec_layers = int()?,
            SweepParam::EncoderWidth => c.encoder_width = int()?,
            SweepParam::PeMode => c.pe_mode = value.parse::<PeMode>().map_err(Error::InvalidConfig)?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub val_bleu4: f64,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn best(&self) -> f64 {
        self.rows.iter().map(|r| r.val_bleu4).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {:?} | val BLEU-4 | best step |\n|---|---|---|\n", self.param);
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.4} | {} |", r.value, r.val_bleu4, r.best_step);
        }
        s
    }
}

/// One model per value, all with the base seed; reports validation BLEU-4.
pub fn run_sweep<T: Scalar>(
    param: SweepParam,
    values: &[String],
    dataset: &Dataset,
    base: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let shared = Experiment::new(dataset, base.k, base.coord_weight)?;
    let mut rows = Vec::new();
    for value in values {
        let config = param.apply(base, value)?;
        let own;
        let exp = if config.k != base.k {
            own = Experiment::new(dataset, config.k, config.coord_weight)?;
            &own
        } else {
            &shared
        };
        let dir = out_dir.map(|d| d.join(value));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let outcome = train::<T>(&config, exp, dir.as_deref())?;
        log::info!("sweep {param:?}={value}: val bleu4 {:.4}", outcome.best_val_bleu4);
        rows.push(SweepRow {
            value: value.clone(),
            val_bleu4: outcome.best_val_bleu4,
            best_step: outcome.best_step,
        });
    }
    Ok(SweepTable {
        param,
        seed: base.seed,
        rows,
    })
}
