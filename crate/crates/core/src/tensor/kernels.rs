//! Forward/backward numeric kernels on plain tensors.
//!
//! The tape records calls to these; the cached inference decoder calls
//! them directly, so both paths share one implementation of every op.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-D operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, ka, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (kb, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dims differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        ka,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    Ok(out)
}

/// `x · w + b` for `x: [m×in]`, `w: [in×out]`, `b: [out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, false, w, false)?;
    add_row_inplace(&mut y, b)?;
    Ok(y)
}

pub fn add_row_inplace<T: Scalar>(x: &mut Tensor<T>, row: &Tensor<T>) -> Result<()> {
    let c = x.cols();
    if row.numel() != c {
        return Err(Error::shape(
            "add_row",
            format!("row of {} onto {:?}", row.numel(), x.shape()),
        ));
    }
    let r = row.data().to_vec();
    for chunk in x.data_mut().chunks_mut(c) {
        for (v, &b) in chunk.iter_mut().zip(&r) {
            *v += b;
        }
    }
    Ok(())
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`; the latter two feed backward.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let c = x.cols();
    if c == 0 || gain.numel() != c || bias.numel() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let eps = T::of(LAYER_NORM_EPS);
    let n = T::of(c as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rstd;
        }
        let xh = xhat.row(r).to_vec();
        for (j, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((y, xhat, rstds))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    rstd: &[T],
    gain: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = xhat.cols();
    let n = T::of(c as f64);
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    let mut dxhat = vec![T::zero(); c];
    for r in 0..xhat.rows() {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        for j in 0..c {
            dg.data_mut()[j] += dyr[j] * xh[j];
            db.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data()[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dg, db)
}

/// Stabilized softmax along `axis` of an N-D tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let data = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let mut max = T::neg_infinity();
            for t in 0..len {
                max = max.max(data[idx(t)]);
            }
            let mut sum = T::zero();
            for t in 0..len {
                let e = (data[idx(t)] - max).exp();
                data[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                data[idx(t)] /= sum;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let mut dx = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let dot: T = (0..len).map(|t| dy.data()[idx(t)] * y.data()[idx(t)]).sum();
            for t in 0..len {
                dx.data_mut()[idx(t)] = y.data()[idx(t)] * (dy.data()[idx(t)] - dot);
            }
        }
    }
    dx
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {} out of range for {:?}", axis, shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + T::of(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Which keys each query may see.
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    /// Key j visible to query i only if `j <= i + offset`.
    pub causal: bool,
    /// Number of keys preceding the first query (incremental decoding).
    pub offset: usize,
    /// Per-key validity; `None` means all keys valid.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            causal: true,
            ..Self::default()
        }
    }

    pub fn keys(valid: Vec<bool>) -> Self {
        Self {
            key_valid: Some(valid),
            ..Self::default()
        }
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i + self.offset {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|v| v[j])
    }
}

/// Multi-head scaled dot-product attention on pre-projected `q, k, v`.
///
/// Returns the concatenated head outputs `[nq×d]` and the attention
/// probabilities laid out `[head][query][key]`.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &AttnMask,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != nk || heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?}, heads {}",
                q.shape(),
                k.shape(),
                v.shape(),
                heads
            ),
        ));
    }
    if let Some(valid) = &mask.key_valid {
        if valid.len() != nk {
            return Err(Error::shape("attention", "key mask length"));
        }
    }
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut out = Tensor::zeros(&[nq, d]);
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        T::gemm(
            nq,
            dh,
            nk,
            scale,
            &q.data()[h * dh..],
            d as isize,
            1,
            &k.data()[h * dh..],
            1,
            d as isize,
            T::zero(),
            p,
            nk as isize,
            1,
        );
        for i in 0..nq {
            let row = &mut p[i * nk..(i + 1) * nk];
            let mut max = T::neg_infinity();
            for (j, &s) in row.iter().enumerate() {
                if mask.allowed(i, j) {
                    max = max.max(s);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::InvalidParams(format!(
                    "attention query {} has no visible keys",
                    i
                )));
            }
            let mut sum = T::zero();
            for (j, s) in row.iter_mut().enumerate() {
                if mask.allowed(i, j) {
                    *s = (*s - max).exp();
                    sum += *s;
                } else {
                    *s = T::zero();
                }
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        T::gemm(
            nq,
            nk,
            dh,
            T::one(),
            p,
            nk as isize,
            1,
            &v.data()[h * dh..],
            d as isize,
            1,
            T::zero(),
            &mut out.data_mut()[h * dh..],
            d as isize,
            1,
        );
    }
    Ok((out, probs))
}

/// Gradients of attention w.r.t. `q, k, v`, plus `dL/dP` per head
/// (same layout as the probabilities) for relevance propagation.
pub struct AttentionGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dprobs: Vec<T>,
}

pub fn attention_backward<T: Scalar>(
    dout: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
) -> AttentionGrads<T> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dprobs = vec![T::zero(); heads * nq * nk];
    let mut ds = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let dp = &mut dprobs[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO_h · V_hᵀ
        T::gemm(
            nq,
            dh,
            nk,
            T::one(),
            &dout.data()[h * dh..],
            d as isize,
            1,
            &v.data()[h * dh..],
            1,
            d as isize,
            T::zero(),
            dp,
            nk as isize,
            1,
        );
        // dV_h = Pᵀ · dO_h
        T::gemm(
            nk,
            nq,
            dh,
            T::one(),
            p,
            1,
            nk as isize,
            &dout.data()[h * dh..],
            d as isize,
            1,
            T::zero(),
            &mut dv.data_mut()[h * dh..],
            d as isize,
            1,
        );
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dpr = &dp[i * nk..(i + 1) * nk];
            let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for j in 0..nk {
                ds[i * nk + j] = pr[j] * (dpr[j] - dot);
            }
        }
        // dQ_h = scale · dS · K_h
        T::gemm(
            nq,
            nk,
            dh,
            scale,
            &ds,
            nk as isize,
            1,
            &k.data()[h * dh..],
            d as isize,
            1,
            T::zero(),
            &mut dq.data_mut()[h * dh..],
            d as isize,
            1,
        );
        // dK_h = scale · dSᵀ · Q_h
        T::gemm(
            nk,
            nq,
            dh,
            scale,
            &ds,
            1,
            nk as isize,
            &q.data()[h * dh..],
            d as isize,
            1,
            T::zero(),
            &mut dk.data_mut()[h * dh..],
            d as isize,
            1,
        );
    }
    AttentionGrads { dq, dk, dv, dprobs }
}

/// Mean negative log-likelihood over non-pad rows. Returns `(loss, probs, count)`.
pub fn cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    pad_id: usize,
) -> Result<(T, Tensor<T>, usize)> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), rows),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::IndexOutOfRange { index: bad, len: v });
    }
    let count = targets.iter().filter(|&&t| t != pad_id).count();
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    let probs = softmax(logits, logits.ndim() - 1)?;
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        // log-sum-exp directly for accuracy at extreme margins
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        total += lse - row[t];
    }
    Ok((total / T::of(count as f64), probs, count))
}

/// Mean of `h[j]` over `neighbors[i]`; zero row for isolated nodes.
pub fn neighbor_mean<T: Scalar>(h: &Tensor<T>, neighbors: &[Vec<usize>]) -> Tensor<T> {
    let c = h.cols();
    let mut out = Tensor::zeros(&[neighbors.len(), c]);
    for (i, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let inv = T::one() / T::of(nbrs.len() as f64);
        let row = out.row_mut(i);
        for &j in nbrs {
            for (o, &x) in row.iter_mut().zip(h.row(j)) {
                *o += x * inv;
            }
        }
    }
    out
}
