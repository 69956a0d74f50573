//! Pre-norm Transformer encoder-decoder over the visual token sequence.

mod infer;
mod record;

use serde::{Deserialize, Serialize};

pub use infer::{argmax, DecoderCache};
pub use record::{AttentionRecord, AttentionMatrix};

use crate::embed::{sinusoid, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::scene::{BOS, PAD};
use crate::tensor::{AttnKind, AttnMask, AttnTag, ParamId, ParamStore, Tape, Tensor, Var};

/// Default cap on generated tokens, end token included.
pub const DEFAULT_MAX_LEN: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            ff_dim: 1024,
            max_len: DEFAULT_MAX_LEN,
            dropout: 0.1,
            vocab_size: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.vocab_size <= 4 || self.ff_dim == 0 {
            return bad("vocab_size must exceed the reserved ids and ff_dim be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHead {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d),
            k: Linear::new(store, init, &format!("{name}.k"), d, d),
            v: Linear::new(store, init, &format!("{name}.v"), d, d),
            o: Linear::new(store, init, &format!("{name}.o"), d, d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        kv: Var,
        heads: usize,
        mask: &AttnMask,
        tag: AttnTag,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let a = tape.attention(q, k, v, heads, mask, Some(tag))?;
        self.o.forward(tape, store, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.l2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHead,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHead,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHead,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub tok_emb: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub out: Linear,
}

fn key_mask(valid: &[bool]) -> AttnMask {
    if valid.iter().all(|&v| v) {
        AttnMask::none()
    } else {
        AttnMask::keys(valid.to_vec())
    }
}

/// 1-D sinusoidal positions `0..len` of width `d`.
pub fn token_positions<T: Scalar>(start: usize, len: usize, d: usize) -> Tensor<T> {
    let data = (start..start + len).flat_map(|p| sinusoid(p, d)).map(T::of).collect();
    Tensor::from_vec(&[len, d], data).expect("shape matches")
}

impl Transformer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = |store: &mut ParamStore<T>, init: &mut Init, name: String| FeedForward {
            l1: Linear::new(store, init, &format!("{name}.ff1"), d, config.ff_dim),
            l2: Linear::new(store, init, &format!("{name}.ff2"), config.ff_dim, d),
        };
        let encoder = (0..config.enc_layers)
            .map(|l| {
                let name = format!("enc.{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    attn: MultiHead::new(store, init, &format!("{name}.attn"), d),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    ff: ff(store, init, name),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "enc.norm", d);
        let tok_emb = store.add("dec.tok_emb", init.normal(&[config.vocab_size, d], 1.0));
        let decoder = (0..config.dec_layers)
            .map(|l| {
                let name = format!("dec.{l}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    self_attn: MultiHead::new(store, init, &format!("{name}.self"), d),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    cross_attn: MultiHead::new(store, init, &format!("{name}.cross"), d),
                    ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
                    ff: ff(store, init, name),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "dec.norm", d);
        let out = Linear::new(store, init, "dec.out", d, config.vocab_size);
        Ok(Self {
            config,
            encoder,
            enc_norm,
            tok_emb,
            decoder,
            dec_norm,
            out,
        })
    }

    fn residual<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, branch: Var) -> Result<Var> {
        let b = tape.dropout(branch, self.config.dropout)?;
        tape.add(x, b)
    }

    /// Encoder memory, one row per input slot.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: &EmbeddingSequence) -> Result<Var> {
        if tape.value(seq.tokens).rows() != seq.valid.len() {
            return Err(Error::shape("encode", "token rows differ from mask length"));
        }
        let mask = key_mask(&seq.valid);
        let heads = self.config.heads;
        let mut x = tape.dropout(seq.tokens, self.config.dropout)?;
        for (l, layer) in self.encoder.iter().enumerate() {
            let h = layer.ln1.forward(tape, store, x)?;
            let tag = AttnTag {
                kind: AttnKind::EncoderSelf,
                layer: l,
            };
            let a = layer.attn.forward(tape, store, h, h, heads, &mask, tag)?;
            x = self.residual(tape, x, a)?;
            let h = layer.ln2.forward(tape, store, x)?;
            let f = layer.ff.forward(tape, store, h)?;
            x = self.residual(tape, x, f)?;
        }
        self.enc_norm.forward(tape, store, x)
    }

    /// Logits `[len(prefix) × V]`; row `t` predicts the token after `prefix[t]`.
    pub fn decode_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: Var,
        mem_valid: &[bool],
        prefix: &[usize],
    ) -> Result<Var> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::InvalidParams("decoder prefix must start with BOS".into()));
        }
        let d = self.config.d_model;
        let heads = self.config.heads;
        let emb = tape.param(store, self.tok_emb);
        let tok = tape.gather_rows(emb, prefix)?;
        let x = tape.add_const(tok, &token_positions(0, prefix.len(), d))?;
        let mut x = tape.dropout(x, self.config.dropout)?;
        let causal = AttnMask::causal();
        let cross_mask = key_mask(mem_valid);
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = layer.ln1.forward(tape, store, x)?;
            let tag = AttnTag {
                kind: AttnKind::DecoderSelf,
                layer: l,
            };
            let a = layer.self_attn.forward(tape, store, h, h, heads, &causal, tag)?;
            x = self.residual(tape, x, a)?;
            let h = layer.ln2.forward(tape, store, x)?;
            let tag = AttnTag {
                kind: AttnKind::DecoderCross,
                layer: l,
            };
            let a = layer.cross_attn.forward(tape, store, h, memory, heads, &cross_mask, tag)?;
            x = self.residual(tape, x, a)?;
            let h = layer.ln3.forward(tape, store, x)?;
            let f = layer.ff.forward(tape, store, h)?;
            x = self.residual(tape, x, f)?;
        }
        let x = self.dec_norm.forward(tape, store, x)?;
        self.out.forward(tape, store, x)
    }

    /// Cross-entropy of `gold[1..]` given `gold[..len-1]`, pad positions masked.
    pub fn teacher_forced_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: Var,
        mem_valid: &[bool],
        gold: &[usize],
    ) -> Result<Var> {
        if gold.len() < 2 {
            return Err(Error::EmptyTarget);
        }
        let logits = self.decode_logits(tape, store, memory, mem_valid, &gold[..gold.len() - 1])?;
        tape.cross_entropy(logits, &gold[1..], PAD)
    }
}
