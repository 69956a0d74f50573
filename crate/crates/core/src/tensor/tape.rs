//! Dynamic reverse-mode tape.
//!
//! Each forward pass records its ops on a fresh [`Tape`]; `backward` walks
//! the record in exact reverse order. Inputs always precede their op, so the
//! record is a topological order by construction.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, AttnMask};
use crate::tensor::param::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Reference to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where an attention op sits in the model; kept for relevance propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnKind {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttnTag {
    pub kind: AttnKind,
    pub layer: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    /// `(offset + s) * x` with `s` a one-element tensor.
    ScaleBy { x: Var, s: Var, offset: T },
    /// `x + c` with a constant `c` (gradient passes through).
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Tensor<T>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        tag: Option<AttnTag>,
    },
    NeighborMean { x: Var, neighbors: Vec<Vec<usize>> },
    WeightedSum { alpha: Var, xs: Vec<Var> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
    Element { x: Var, index: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Attention probabilities retained from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionProbs<'a, T> {
    pub var: Var,
    pub tag: AttnTag,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[head][query][key]`
    pub probs: &'a [T],
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: None,
        }
    }

    /// Training tape; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a parameter once per tape; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), false, self.value(b), false)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    /// Broadcast-adds a `[cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        kernels::add_row_inplace(&mut out, self.value(row))?;
        let ng = self.needs(x) || self.needs(row);
        self.push("add_row", out, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push("scale", out, Op::Scale(x, s), ng)
    }

    /// `(offset + s) · x` where `s` holds a single learnable scalar.
    pub fn scale_by(&mut self, x: Var, s: Var, offset: T) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", "scale must hold one element"));
        }
        let f = offset + self.value(s).item();
        let out = self.value(x).map(|v| v * f);
        let ng = self.needs(x) || self.needs(s);
        self.push("scale_by", out, Op::ScaleBy { x, s, offset }, ng)
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let ng = self.needs(x);
        self.push("add_const", out, Op::AddConst(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push("relu", out, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.needs(x);
        self.push("gelu", out, Op::Gelu(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let ng = self.needs(x);
        self.push("softmax", out, Op::Softmax { x, axis }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(self.value(x), self.value(gain), self.value(bias))?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Mean token NLL over positions whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (loss, probs, count) =
            kernels::cross_entropy_forward(self.value(logits), targets, pad_id)?;
        let ng = self.needs(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            ng,
        )
    }

    /// Multi-head attention over pre-projected `q, k, v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        tag: Option<AttnTag>,
    ) -> Result<Var> {
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), heads, mask)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                tag,
            },
            ng,
        )
    }

    /// Row `i` of the output is the mean of rows `neighbors[i]` of `x`.
    pub fn neighbor_mean(&mut self, x: Var, neighbors: &[Vec<usize>]) -> Result<Var> {
        let n = self.value(x).rows();
        if neighbors.len() != n {
            return Err(Error::shape(
                "neighbor_mean",
                format!("{} adjacency rows for {} nodes", neighbors.len(), n),
            ));
        }
        if let Some(&bad) = neighbors.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let out = kernels::neighbor_mean(self.value(x), neighbors);
        let ng = self.needs(x);
        self.push(
            "neighbor_mean",
            out,
            Op::NeighborMean {
                x,
                neighbors: neighbors.to_vec(),
            },
            ng,
        )
    }

    /// `Σ_l alpha[l] · xs[l]`.
    pub fn weighted_sum(&mut self, alpha: Var, xs: &[Var]) -> Result<Var> {
        let a = self.value(alpha).data().to_vec();
        if a.len() != xs.len() || xs.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} inputs", a.len(), xs.len()),
            ));
        }
        let shape = self.shape(xs[0]).to_vec();
        let mut out = Tensor::zeros(&shape);
        for (&w, &x) in a.iter().zip(xs) {
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", "inputs differ in shape"));
            }
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += w * v;
            }
        }
        let ng = self.needs(alpha) || xs.iter().any(|&x| self.needs(x));
        self.push(
            "weighted_sum",
            out,
            Op::WeightedSum {
                alpha,
                xs: xs.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push("concat_rows", out, Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &x in xs {
            let t = self.value(x);
            let c = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push("concat_cols", out, Op::ConcatCols(xs.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::IndexOutOfRange {
                index: end,
                len: t.rows(),
            });
        }
        let c = t.cols();
        let out = Tensor::from_vec(&[end - start, c], t.data()[start * c..end * c].to_vec())?;
        let ng = self.needs(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, ng)
    }

    /// Embedding lookup: row `r` of the output is row `ids[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), c], data)?;
        let ng = self.needs(table);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Inverted dropout; identity on evaluation tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("training tape has an rng");
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        let ng = self.needs(x);
        self.push("dropout", out, Op::Dropout { x, mask }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / T::of(t.numel() as f64);
        let ng = self.needs(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::IndexOutOfRange {
                index,
                len: t.numel(),
            });
        }
        let v = t.data()[index];
        let ng = self.needs(x);
        self.push("element", Tensor::scalar(v), Op::Element { x, index }, ng)
    }

    /// Attention ops recorded on this tape, in execution order.
    pub fn attention_probs(&self) -> Vec<AttentionProbs<'_, T>> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                Op::Attention {
                    q,
                    k,
                    heads,
                    probs,
                    tag: Some(tag),
                    ..
                } => Some(AttentionProbs {
                    var: Var(i),
                    tag: *tag,
                    heads: *heads,
                    queries: self.value(*q).rows(),
                    keys: self.value(*k).rows(),
                    probs: probs.as_slice(),
                }),
                _ => None,
            })
            .collect()
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut dprobs = HashMap::new();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &node.op, &g, &mut grads, &mut dprobs)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            attn_dprobs: dprobs,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(
        &self,
        idx: usize,
        op: &Op<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        dprobs: &mut HashMap<Var, Vec<T>>,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = kernels::matmul(g, false, self.value(*b), true)?;
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = kernels::matmul(self.value(*a), true, g, false)?;
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = mul_elem(g, self.value(*b));
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = mul_elem(g, self.value(*a));
                    self.acc(grads, *b, db);
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*row) {
                    let c = g.cols();
                    let mut dr = Tensor::zeros(self.shape(*row));
                    for chunk in g.data().chunks(c) {
                        for (d, &v) in dr.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *row, dr);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::ScaleBy { x, s, offset } => {
                let f = *offset + self.value(*s).item();
                if self.needs(*x) {
                    self.acc(grads, *x, g.map(|v| v * f));
                }
                if self.needs(*s) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.acc(grads, *s, Tensor::from_vec(self.shape(*s), vec![dot])?);
                }
            }
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Softmax { x, axis } => {
                let dx = kernels::softmax_backward(g, &self.nodes[idx].value, *axis);
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, self.value(*gain));
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dg);
                self.acc(grads, *bias, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                let scale = g.item() / T::of(*count as f64);
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    if t == *pad_id {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.acc(grads, *logits, dl);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                tag,
            } => {
                let ag = kernels::attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *heads,
                );
                self.acc(grads, *q, ag.dq);
                self.acc(grads, *k, ag.dk);
                self.acc(grads, *v, ag.dv);
                if tag.is_some() {
                    dprobs.insert(Var(idx), ag.dprobs);
                }
            }
            Op::NeighborMean { x, neighbors } => {
                let c = g.cols();
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, nbrs) in neighbors.iter().enumerate() {
                    if nbrs.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::of(nbrs.len() as f64);
                    let gi = g.row(i);
                    for &j in nbrs {
                        let row = &mut dx.data_mut()[j * c..(j + 1) * c];
                        for (d, &v) in row.iter_mut().zip(gi) {
                            *d += v * inv;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::WeightedSum { alpha, xs } => {
                let a = self.value(*alpha).data().to_vec();
                if self.needs(*alpha) {
                    let da = xs
                        .iter()
                        .map(|&x| {
                            g.data()
                                .iter()
                                .zip(self.value(x).data())
                                .map(|(&p, &q)| p * q)
                                .sum()
                        })
                        .collect();
                    self.acc(grads, *alpha, Tensor::from_vec(self.shape(*alpha), da)?);
                }
                for (&w, &x) in a.iter().zip(xs) {
                    if self.needs(x) {
                        self.acc(grads, x, g.map(|v| v * w));
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let c = g.cols();
                let mut off = 0;
                for &x in xs {
                    let r = self.value(x).rows();
                    if self.needs(x) {
                        let part = Tensor::from_vec(
                            self.shape(x),
                            g.data()[off * c..(off + r) * c].to_vec(),
                        )?;
                        self.acc(grads, x, part);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = g.rows();
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    if self.needs(x) {
                        let mut part = Tensor::zeros(self.shape(x));
                        for r in 0..rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                        }
                        self.acc(grads, x, part);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = g.cols();
                dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.acc(grads, *x, dx);
            }
            Op::GatherRows { table, ids } => {
                let mut dt = Tensor::zeros(self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.acc(grads, *x, Tensor::from_vec(g.shape(), data)?);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                let s = g.item() / n;
                self.acc(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Element { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                dx.data_mut()[*index] = g.item();
                self.acc(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn mul_elem<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    attn_dprobs: HashMap<Var, Vec<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` is unreachable from the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// `dL/dP` for a tagged attention op.
    pub fn attention_dprobs(&self, v: Var) -> Option<&[T]> {
        self.attn_dprobs.get(&v).map(Vec::as_slice)
    }

    /// Gradients for every parameter recorded on the tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(store.len());
        for (&id, &v) in &self.params {
            if !store.is_trainable(id) {
                continue;
            }
            if let Some(g) = self.get(v) {
                out.set(id, g.clone());
            }
        }
        out
    }
}
