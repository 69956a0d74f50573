//! Tape-free incremental decoding with cached keys and values.

use super::{key_mask, token_positions, Transformer};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::scene::{BOS, EOS};
use crate::tensor::kernels::{self, AttnMask};
use crate::tensor::{ParamStore, Tensor};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-layer key/value cache for one decoding hypothesis.
#[derive(Clone)]
pub struct DecoderCache<T> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    cross_k: Vec<Tensor<T>>,
    cross_v: Vec<Tensor<T>>,
    cross_mask: AttnMask,
    len: usize,
}

fn residual_add<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>) {
    x.add_assign(y);
}

impl Transformer {
    pub fn start_cache<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        memory: &Tensor<T>,
        mem_valid: &[bool],
    ) -> Result<DecoderCache<T>> {
        let mut cross_k = Vec::with_capacity(self.decoder.len());
        let mut cross_v = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            cross_k.push(layer.cross_attn.k.apply(store, memory)?);
            cross_v.push(layer.cross_attn.v.apply(store, memory)?);
        }
        Ok(DecoderCache {
            self_k: vec![Vec::new(); self.decoder.len()],
            self_v: vec![Vec::new(); self.decoder.len()],
            cross_k,
            cross_v,
            cross_mask: key_mask(mem_valid),
            len: 0,
        })
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut DecoderCache<T>, token: usize) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let emb = store.get(self.tok_emb);
        let mut x = Tensor::from_vec(&[1, d], emb.row(token).to_vec())?;
        residual_add(&mut x, &token_positions(cache.len, 1, d));
        let rows = cache.len + 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = layer.ln1.apply(store, &x)?;
            let q = layer.self_attn.q.apply(store, &h)?;
            cache.self_k[l].extend_from_slice(layer.self_attn.k.apply(store, &h)?.data());
            cache.self_v[l].extend_from_slice(layer.self_attn.v.apply(store, &h)?.data());
            let k = Tensor::from_vec(&[rows, d], cache.self_k[l].clone())?;
            let v = Tensor::from_vec(&[rows, d], cache.self_v[l].clone())?;
            let (a, _) = kernels::attention_forward(&q, &k, &v, heads, &AttnMask::none())?;
            residual_add(&mut x, &layer.self_attn.o.apply(store, &a)?);

            let h = layer.ln2.apply(store, &x)?;
            let q = layer.cross_attn.q.apply(store, &h)?;
            let (a, _) = kernels::attention_forward(&q, &cache.cross_k[l], &cache.cross_v[l], heads, &cache.cross_mask)?;
            residual_add(&mut x, &layer.cross_attn.o.apply(store, &a)?);

            let h = layer.ln3.apply(store, &x)?;
            let f = layer.ff.l1.apply(store, &h)?.map(kernels::gelu);
            residual_add(&mut x, &layer.ff.l2.apply(store, &f)?);
        }
        cache.len = rows;
        let x = self.dec_norm.apply(store, &x)?;
        Ok(self.out.apply(store, &x)?.into_data())
    }

    /// Greedy decoding. At most `max_len` tokens are produced, the end token
    /// included; the returned report omits BOS and EOS.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        memory: &Tensor<T>,
        mem_valid: &[bool],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut cache = self.start_cache(store, memory, mem_valid)?;
        let mut out = Vec::new();
        let mut token = BOS;
        for _ in 0..max_len {
            let logits = self.step(store, &mut cache, token)?;
            token = argmax(&logits);
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }

    /// Beam search over summed log-probabilities. Width 1 reproduces greedy.
    pub fn beam_search<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        memory: &Tensor<T>,
        mem_valid: &[bool],
        width: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        struct Hyp<T> {
            tokens: Vec<usize>,
            score: f64,
            cache: DecoderCache<T>,
        }
        let width = width.max(1);
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            cache: self.start_cache(store, memory, mem_valid)?,
        }];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max_len {
            // (score, parent beam, token)
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (b, hyp) in alive.iter_mut().enumerate() {
                let last = hyp.tokens.last().copied().unwrap_or(BOS);
                let logits = self.step(store, &mut hyp.cache, last)?;
                let lp = log_softmax(&logits);
                for (tok, &l) in lp.iter().enumerate() {
                    cand.push((hyp.score + l, b, tok));
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for &(score, b, tok) in cand.iter().take(width) {
                if tok == EOS {
                    finished.push((alive[b].tokens.clone(), score));
                } else {
                    let mut tokens = alive[b].tokens.clone();
                    tokens.push(tok);
                    next.push(Hyp {
                        tokens,
                        score,
                        cache: alive[b].cache.clone(),
                    });
                }
            }
            alive = next;
            let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            if alive.is_empty() || best_done >= best_alive {
                break;
            }
        }
        let mut pool: Vec<(Vec<usize>, f64)> = finished;
        pool.extend(alive.into_iter().map(|h| (h.tokens, h.score)));
        pool.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(pool.into_iter().next().map(|p| p.0).unwrap_or_default())
    }
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|&x| x - lse).collect()
}
