//! Dense f64 tensor math for a transformer forward pass.
//!
//! Everything here is pure and deterministic: matrix products accumulate
//! left-to-right over the contraction dimension, so the same inputs give
//! bit-identical outputs on any thread and any worker count. Higher modules
//! depend on this module and on nothing else numeric.

use crate::error::{Error, Result};

/// Thread-local multiply-accumulate meter.
///
/// Only linear-layer applications ([`linear`] / [`linear_no_bias`]) are
/// counted; attention score/context products are not linear layers and do
/// not count. Each worker thread folds its deltas into runtime telemetry.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
    }

    /// Reset this thread's counter to zero.
    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    /// Read this thread's counter.
    pub fn get() -> u64 {
        MACS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract: every dimension
    /// is at least 1, the data length equals the shape product, and every
    /// scalar is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor shape must have rank >= 1 with all dims >= 1, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Validation(format!(
                "tensor data length {} does not match shape {shape:?} (= {expect})",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes this tensor occupies as 64-bit scalars.
    pub fn byte_len(&self) -> u64 {
        (self.data.len() * 8) as u64
    }

    /// Reinterpret with a new shape of the same total size.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Last dimension (feature width for activations).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when the tensor is viewed as [rows, last_dim].
    pub fn leading_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.last_dim();
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Copy a contiguous range of rows (viewed as [rows, last_dim]).
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let w = self.last_dim();
        Tensor {
            shape: vec![end - start, w],
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    /// Copy a contiguous range of columns (viewed as [rows, last_dim]).
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let w = self.last_dim();
        let rows = self.leading_rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * w + start..r * w + end]);
        }
        Tensor {
            shape: vec![rows, end - start],
            data,
        }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.check_finite("add")?;
        Ok(out)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{op}: non-finite scalar in tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Which attention positions are visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    LengthBased,
    CausalLengthBased,
}

/// Attention mask: none, causal, valid-length based, or both combined.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    valid_lengths: Option<Vec<usize>>,
}

impl AttentionMask {
    pub fn none() -> Self {
        AttentionMask {
            kind: MaskKind::None,
            valid_lengths: None,
        }
    }

    pub fn causal() -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            valid_lengths: None,
        }
    }

    pub fn length_based(valid_lengths: Vec<usize>) -> Self {
        AttentionMask {
            kind: MaskKind::LengthBased,
            valid_lengths: Some(valid_lengths),
        }
    }

    pub fn causal_length_based(valid_lengths: Vec<usize>) -> Self {
        AttentionMask {
            kind: MaskKind::CausalLengthBased,
            valid_lengths: Some(valid_lengths),
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Check the mask against a batch of `batch` sequences padded to `seq`.
    pub fn validate(&self, batch: usize, seq: usize) -> Result<()> {
        match self.kind {
            MaskKind::None | MaskKind::Causal => Ok(()),
            MaskKind::LengthBased | MaskKind::CausalLengthBased => {
                let lens = self
                    .valid_lengths
                    .as_ref()
                    .ok_or_else(|| Error::Validation("length mask without lengths".into()))?;
                if lens.len() != batch {
                    return Err(Error::Validation(format!(
                        "mask has {} lengths for batch of {batch}",
                        lens.len()
                    )));
                }
                for (i, &l) in lens.iter().enumerate() {
                    if l < 1 || l > seq {
                        return Err(Error::Validation(format!(
                            "mask length {l} for sequence {i} outside [1, {seq}]"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Is key position `j` visible to query position `i` of sequence `b`?
    pub fn unmasked(&self, b: usize, i: usize, j: usize) -> bool {
        let len_ok = |lens: &Vec<usize>| j < lens[b];
        match self.kind {
            MaskKind::None => true,
            MaskKind::Causal => j <= i,
            MaskKind::LengthBased => len_ok(self.valid_lengths.as_ref().unwrap()),
            MaskKind::CausalLengthBased => {
                j <= i && len_ok(self.valid_lengths.as_ref().unwrap())
            }
        }
    }
}

/// Matrix product of a [m,k] by b [k,n], accumulating left-to-right over k.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out = matmul_rows(&a.data, a.shape[0], a.shape[1], &b.data, b.shape[1]);
    let t = Tensor {
        shape: vec![a.shape[0], b.shape[1]],
        data: out,
    };
    t.check_finite("matmul")?;
    Ok(t)
}

/// Row-major product core: per output element the k terms are added in
/// ascending order, which keeps every caller bit-reproducible.
fn matmul_rows(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = i * k;
        let o_row = i * n;
        for p in 0..k {
            let a_val = a[a_row + p];
            let b_row = p * n;
            for j in 0..n {
                out[o_row + j] += a_val * b[b_row + j];
            }
        }
    }
    out
}

/// Apply a linear layer: x viewed as [rows, k] times w [k,n], bias b [n]
/// added after the full contraction. Counts rows*k*n multiply-accumulates.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = linear_no_bias(x, w)?;
    add_bias(&y, b)
}

/// Linear layer without the bias term; counted like [`linear`].
pub fn linear_no_bias(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.shape.len() != 2 || x.last_dim() != w.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    let rows = x.leading_rows();
    let (k, n) = (w.shape[0], w.shape[1]);
    macs::add((rows * k * n) as u64);
    let data = matmul_rows(&x.data, rows, k, &w.data, n);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = n;
    let t = Tensor { shape, data };
    t.check_finite("linear")?;
    Ok(t)
}

/// Add a [n] bias to every row of x viewed as [rows, n].
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 1 || b.shape[0] != x.last_dim() {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: x.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = x.clone();
    let n = b.shape[0];
    for r in 0..out.leading_rows() {
        let row = out.row_mut(r);
        for j in 0..n {
            row[j] += b.data[j];
        }
    }
    out.check_finite("add_bias")?;
    Ok(out)
}

/// Per-row mean-0/variance-1 normalization over the last dimension, then
/// the gamma/beta affine transform.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let h = x.last_dim();
    if gamma.shape != [h] || beta.shape != [h] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let mut out = x.clone();
    for r in 0..out.leading_rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..h {
            row[j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    out.check_finite("layer_norm")?;
    Ok(out)
}

/// Row-wise softmax over the last dimension of a [B,h,S,S] score tensor,
/// restricted to unmasked positions. Masked positions are exactly zero and
/// the row max over unmasked scores is subtracted before exponentiation.
pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            left: shape.to_vec(),
            right: shape.to_vec(),
        });
    }
    let (b, heads, s) = (shape[0], shape[1], shape[2]);
    mask.validate(b, s)?;
    let mut out = Tensor::zeros(shape.to_vec());
    for bi in 0..b {
        for hd in 0..heads {
            for i in 0..s {
                let base = ((bi * heads + hd) * s + i) * s;
                let row = &scores.data[base..base + s];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s {
                    if mask.unmasked(bi, i, j) && row[j] > max {
                        max = row[j];
                    }
                }
                let mut denom = 0.0;
                for j in 0..s {
                    if mask.unmasked(bi, i, j) {
                        denom += (row[j] - max).exp();
                    }
                }
                let dst = &mut out.data[base..base + s];
                for j in 0..s {
                    if mask.unmasked(bi, i, j) {
                        dst[j] = (row[j] - max).exp() / denom;
                    }
                }
            }
        }
    }
    out.check_finite("masked_softmax")?;
    Ok(out)
}

/// GELU with the tanh approximation and fixed coefficients.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608 * (x + 0.044715 * x * x * x)).tanh())
}

/// Elementwise GELU over a whole tensor.
pub fn gelu_tensor(x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| gelu(v)).collect();
    let t = Tensor {
        shape: x.shape.clone(),
        data,
    };
    t.check_finite("gelu")?;
    Ok(t)
}

/// Two-layer MLP: linear [H,4H] -> GELU -> linear [4H,H].
pub fn mlp_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let hidden = linear(x, w1, b1)?;
    let act = gelu_tensor(&hidden)?;
    linear(&act, w2, b2)
}

/// Attention projection weights and biases, all [H,H] / [H].
#[derive(Debug, Clone)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

/// Scaled dot-product multi-head attention over x [B,S,H].
///
/// Heads are contiguous column blocks of the projections; each head is
/// scaled by 1/sqrt(H/heads), softmaxed under the mask, and the concatenated
/// context goes through the output projection.
pub fn multi_head_attention(
    x: &Tensor,
    w: &AttentionWeights,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!(
            "hidden {h} not divisible by {heads} heads"
        )));
    }
    let q = linear(x, w.wq, w.bq)?;
    let k = linear(x, w.wk, w.bk)?;
    let v = linear(x, w.wv, w.bv)?;
    let ctx = attention_core(&q, &k, &v, b, s, heads, mask)?;
    linear(&ctx, w.wo, w.bo)
}

/// Score/softmax/context part of attention, shared by the serial, sharded,
/// and packed paths. q/k/v are [B,S,width] where width covers `heads` heads.
pub(crate) fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    b: usize,
    s: usize,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let width = q.last_dim();
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    mask.validate(b, s)?;

    let mut scores = Tensor::zeros(vec![b, heads, s, s]);
    for bi in 0..b {
        for hd in 0..heads {
            let c0 = hd * d;
            for i in 0..s {
                let qi = &q.data[(bi * s + i) * width + c0..(bi * s + i) * width + c0 + d];
                for j in 0..s {
                    let kj = &k.data[(bi * s + j) * width + c0..(bi * s + j) * width + c0 + d];
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += qi[t] * kj[t];
                    }
                    scores.data[((bi * heads + hd) * s + i) * s + j] = dot * scale;
                }
            }
        }
    }
    let attn = masked_softmax(&scores, mask)?;

    let mut ctx = Tensor::zeros(vec![b, s, width]);
    for bi in 0..b {
        for hd in 0..heads {
            let c0 = hd * d;
            for i in 0..s {
                let out_base = (bi * s + i) * width + c0;
                for t in 0..s {
                    let wgt = attn.data[((bi * heads + hd) * s + i) * s + t];
                    let vt = &v.data[(bi * s + t) * width + c0..(bi * s + t) * width + c0 + d];
                    for c in 0..d {
                        ctx.data[out_base + c] += wgt * vt[c];
                    }
                }
            }
        }
    }
    ctx.check_finite("attention")?;
    Ok(ctx)
}
