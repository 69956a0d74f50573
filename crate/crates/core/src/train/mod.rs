//! Training loop with BLEU-4 model selection, evaluation and experiment drivers.

mod bundle;
mod experiments;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bundle::{Bundle, BUNDLE_SUFFIX};
pub use experiments::{
    run_ablation_suite, run_sweep, AblationRow, AblationTable, MeanStd, SweepParam, SweepRow, SweepTable,
};

use crate::embed::{PeMode, SceneInput, Variant};
use crate::error::{Error, Result};
use crate::graph::{AttributeScaler, GraphBuilder, DEFAULT_COORD_WEIGHT};
use crate::metrics::{bleu, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::scene::dataset::Dataset;
use crate::scene::{Scene, Vocabulary};
use crate::seq2seq::DEFAULT_MAX_LEN;
use crate::tensor::{AdamConfig, AdamState, ParamGrads, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub k: usize,
    pub coord_weight: f64,
    pub gnn_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Feed-forward width; 0 means `4 · d_model`.
    pub ff_dim: usize,
    pub encoder_width: usize,
    pub pe_mode: PeMode,
    pub agg_include_input: bool,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub patience: usize,
    pub val_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            k: 5,
            coord_weight: DEFAULT_COORD_WEIGHT,
            gnn_layers: 4,
            enc_layers: 3,
            dec_layers: 3,
            heads: 8,
            d_model: 256,
            ff_dim: 0,
            encoder_width: 256,
            pe_mode: PeMode::Sine,
            agg_include_input: false,
            dropout: 0.1,
            lr: 3e-4,
            batch_size: 8,
            max_steps: 20_000,
            patience: 10,
            val_every: 250,
            clip_norm: 1.0,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("gnn_layers", self.gnn_layers),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("encoder_width", self.encoder_width),
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("patience", self.patience),
            ("val_every", self.val_every),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.coord_weight >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidConfig("lr must be positive; coord_weight and clip_norm non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ff_dim: if self.ff_dim == 0 { 4 * self.d_model } else { self.ff_dim },
            gnn_layers: self.gnn_layers,
            encoder_width: self.encoder_width,
            pe_mode: self.pe_mode,
            agg_include_input: self.agg_include_input,
            dropout: self.dropout,
            max_len: self.max_len,
            vocab_size,
        }
    }
}

/// Scenes turned into model inputs plus encoded and raw references.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inputs: Vec<SceneInput>,
    /// `BOS … EOS` ids per reference.
    pub golds: Vec<Vec<Vec<usize>>>,
    /// Reference tokens without the end token.
    pub references: Vec<Vec<Vec<String>>>,
}

/// Reference tokens with the trailing end token removed.
pub fn strip_eos(report: &[String]) -> Vec<String> {
    report
        .iter()
        .filter(|t| t.as_str() != crate::scene::EOS_TOKEN)
        .cloned()
        .collect()
}

impl Prepared {
    pub fn new(scenes: &[Scene], builder: &GraphBuilder, vocab: &Vocabulary) -> Result<Self> {
        let inputs = scenes
            .iter()
            .map(|s| SceneInput::new(s, builder))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            golds: scenes
                .iter()
                .map(|s| s.reports.iter().map(|r| vocab.encode_report(r)).collect())
                .collect(),
            references: scenes
                .iter()
                .map(|s| s.reports.iter().map(|r| strip_eos(r)).collect())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            golds: idx.iter().map(|&i| self.golds[i].clone()).collect(),
            references: idx.iter().map(|&i| self.references[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub val_bleu4: f64,
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters of the best validation checkpoint.
    pub model: Model<T>,
    pub bundle: Bundle,
    pub best_val_bleu4: f64,
    pub best_step: usize,
    pub steps: usize,
    pub log: Vec<LogEntry>,
}

/// Splits, graph settings and vocabulary ready for training.
pub struct Experiment {
    pub builder: GraphBuilder,
    pub vocab: Vocabulary,
    pub train: Prepared,
    pub val: Prepared,
    pub test: Prepared,
}

impl Experiment {
    /// Fits the attribute scaler on the training split and builds every input.
    pub fn new(dataset: &Dataset, k: usize, coord_weight: f64) -> Result<Self> {
        if dataset.train.is_empty() {
            return Err(Error::DataMissing("training split is empty".into()));
        }
        let builder = GraphBuilder::new(k, coord_weight, AttributeScaler::fit(&dataset.train));
        Ok(Self {
            train: Prepared::new(&dataset.train, &builder, &dataset.vocab)?,
            val: Prepared::new(&dataset.val, &builder, &dataset.vocab)?,
            test: Prepared::new(&dataset.test, &builder, &dataset.vocab)?,
            builder,
            vocab: dataset.vocab.clone(),
        })
    }
}

/// Greedy reports (as tokens) for every input.
pub fn generate_reports<T: Scalar>(model: &Model<T>, data: &Prepared, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<String>>> {
    data.inputs
        .iter()
        .map(|input| Ok(vocab.decode(&model.generate(input, max_len)?)))
        .collect()
}

/// Corpus BLEU-4 in [0, 1] of greedy generations.
pub fn bleu4<T: Scalar>(model: &Model<T>, data: &Prepared, vocab: &Vocabulary, max_len: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hyps = generate_reports(model, data, vocab, max_len)?;
    Ok(bleu(&hyps, &data.references, 4))
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Prepared,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(EvalReport, Vec<Vec<String>>)> {
    let hyps = generate_reports(model, data, vocab, max_len)?;
    Ok((EvalReport::compute(&hyps, &data.references), hyps))
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::DivergedLoss { step, loss: f64::NAN },
        other => other,
    }
}

/// Mean loss and gradients over `batch` (one tape per scene).
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    data: &Prepared,
    batch: &[(usize, usize)],
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamGrads<T>)> {
    let mut grads = ParamGrads::empty(model.params.len());
    let mut total = 0.0;
    for (i, &(scene, reference)) in batch.iter().enumerate() {
        let mut tape = match dropout_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                Tape::training(rng)
            }
            None => Tape::new(),
        };
        let loss = model.loss(&mut tape, &data.inputs[scene], &data.golds[scene][reference])?;
        total += tape.value(loss).item().to_f64_lossy();
        grads.accumulate(&tape.backward(loss)?.param_grads(&model.params));
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(T::of(scale));
    Ok((total * scale, grads))
}

/// Trains from scratch; when `out_dir` is set, writes the best checkpoint,
/// its metadata and the JSONL log there.
pub fn train<T: Scalar>(config: &TrainConfig, exp: &Experiment, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if exp.train.is_empty() {
        return Err(Error::DataMissing("training split is empty".into()));
    }
    let model_config = config.model_config(exp.vocab.len());
    let mut model = Model::<T>::new(model_config.clone(), config.seed)?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let val = if exp.val.is_empty() { &exp.train } else { &exp.val };

    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.snapshot());
    let mut stale = 0;
    let mut interval_loss = (0.0, 0usize);
    let mut step = 0;
    while step < config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..exp.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let scene = order.pop().expect("refilled above");
            let reference = rng.gen_range(0..exp.train.golds[scene].len());
            batch.push((scene, reference));
        }
        let dropout_seed = rng.gen::<u64>();
        let (loss, mut grads) =
            batch_gradients(&model, &exp.train, &batch, Some(dropout_seed)).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { step, loss });
        }
        if config.clip_norm > 0.0 {
            grads.clip_norm(T::of(config.clip_norm));
        }
        adam.step(&mut model.params, &grads);
        step += 1;
        interval_loss.0 += loss;
        interval_loss.1 += 1;

        if step % config.val_every == 0 || step == config.max_steps {
            let score = bleu4(&model, val, &exp.vocab, config.max_len)?;
            let entry = LogEntry {
                step,
                loss: interval_loss.0 / interval_loss.1 as f64,
                val_bleu4: score,
            };
            log::info!("step {} loss {:.4} val_bleu4 {:.4}", entry.step, entry.loss, entry.val_bleu4);
            log.push(entry);
            interval_loss = (0.0, 0);
            if score > best.0 {
                best = (score, step, model.params.snapshot());
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    model.params.restore(best.2);
    let bundle = Bundle {
        model: model_config,
        train: config.clone(),
        scaler: exp.builder.scaler.clone(),
        vocab: exp.vocab.clone(),
    };
    if let Some(dir) = out_dir {
        bundle.save(&dir.join("best.ckpt"), &model.params)?;
        write_log(&dir.join("log.jsonl"), &log)?;
    }
    Ok(TrainOutcome {
        model,
        bundle,
        best_val_bleu4: best.0,
        best_step: best.1,
        steps: step,
        log,
    })
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
