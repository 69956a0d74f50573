//! The complete report generator: embedder plus Transformer over one parameter store.

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedConfig, Embedder, EmbeddingSequence, PeMode, SceneInput, Variant, CELL_ENCODER_PREFIX};
use crate::error::Result;
use crate::nn::Init;
use crate::scalar::Scalar;
use crate::seq2seq::{Transformer, TransformerConfig, DEFAULT_MAX_LEN};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub gnn_layers: usize,
    pub encoder_width: usize,
    pub pe_mode: PeMode,
    pub agg_include_input: bool,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            d_model: 256,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            ff_dim: 1024,
            gnn_layers: 4,
            encoder_width: 256,
            pe_mode: PeMode::Sine,
            agg_include_input: false,
            dropout: 0.1,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: 64,
        }
    }
}

impl ModelConfig {
    pub fn embed(&self) -> EmbedConfig {
        EmbedConfig {
            variant: self.variant,
            d_model: self.d_model,
            gnn_layers: self.gnn_layers,
            encoder_width: self.encoder_width,
            pe_mode: self.pe_mode,
            agg_include_input: self.agg_include_input,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            dropout: self.dropout,
            vocab_size: self.vocab_size,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedder: Embedder,
    pub transformer: Transformer,
}

/// Encoder output for one scene.
pub struct Encoded {
    pub sequence: EmbeddingSequence,
    pub memory: Var,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`. The frozen-encoder variant marks
    /// the cell encoder as non-trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let embedder = Embedder::new(&mut params, &mut init, config.embed())?;
        let transformer = Transformer::new(&mut params, &mut init, config.transformer())?;
        if config.variant == Variant::FrozenEncoder {
            params.freeze_prefix(CELL_ENCODER_PREFIX);
        }
        Ok(Self {
            config,
            params,
            embedder,
            transformer,
        })
    }

    pub fn encode(&self, tape: &mut Tape<T>, input: &SceneInput) -> Result<Encoded> {
        let sequence = self.embedder.build_sequence(tape, &self.params, input)?;
        let memory = self.transformer.encode(tape, &self.params, &sequence)?;
        Ok(Encoded { sequence, memory })
    }

    /// Teacher-forced loss of `gold` (BOS … EOS ids).
    pub fn loss(&self, tape: &mut Tape<T>, input: &SceneInput, gold: &[usize]) -> Result<Var> {
        let enc = self.encode(tape, input)?;
        self.transformer
            .teacher_forced_loss(tape, &self.params, enc.memory, &enc.sequence.valid, gold)
    }

    pub fn decode_logits(&self, tape: &mut Tape<T>, input: &SceneInput, prefix: &[usize]) -> Result<Var> {
        let enc = self.encode(tape, input)?;
        self.transformer
            .decode_logits(tape, &self.params, enc.memory, &enc.sequence.valid, prefix)
    }

    /// Encoder memory evaluated without dropout.
    pub fn memory(&self, input: &SceneInput) -> Result<(Tensor<T>, Vec<bool>)> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, input)?;
        Ok((tape.value(enc.memory).clone(), enc.sequence.valid))
    }

    /// Greedy report ids (no BOS/EOS), at most `max_len` steps.
    pub fn generate(&self, input: &SceneInput, max_len: usize) -> Result<Vec<usize>> {
        let (memory, valid) = self.memory(input)?;
        self.transformer.generate(&self.params, &memory, &valid, max_len)
    }

    pub fn beam_search(&self, input: &SceneInput, width: usize, max_len: usize) -> Result<Vec<usize>> {
        let (memory, valid) = self.memory(input)?;
        self.transformer
            .beam_search(&self.params, &memory, &valid, width, max_len)
    }
}
