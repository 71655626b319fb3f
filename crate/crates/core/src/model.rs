//! Transformer model definition, deterministic parameter initialization,
//! and the serial reference forward pass.
//!
//! `serial_forward` is the single correctness oracle: every distributed
//! configuration must reproduce it at the valid token positions.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    layer_norm, mlp_forward, multi_head_attention, AttentionMask, AttentionWeights, Tensor,
};

/// Token id used for padding positions.
pub const PAD_TOKEN: u32 = 0;

const INIT_RANGE: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Architecture description. Hidden width and FFN width are derived
/// (`hidden = num_heads * head_dim`, `ffn = 4 * hidden`) so the shape
/// invariants hold by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub causal: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads < 1 || self.head_dim < 1 || self.vocab_size < 1 || self.max_seq < 1 {
            return Err(Error::Config(format!(
                "heads/head_dim/vocab/max_seq must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// All tensors of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    pub fn attention_weights(&self) -> AttentionWeights<'_> {
        AttentionWeights {
            wq: &self.wq,
            bq: &self.bq,
            wk: &self.wk,
            bk: &self.bk,
            wv: &self.wv,
            bv: &self.bv,
            wo: &self.wo,
            bo: &self.bo,
        }
    }

    /// Tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    pub fn byte_len(&self) -> u64 {
        self.param_count() * 8
    }
}

/// Full parameter set: token embedding, learned position embedding,
/// layer stack, final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub pos_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl ModelParams {
    pub fn param_count(&self) -> u64 {
        let layers: u64 = self.layers.iter().map(LayerParams::param_count).sum();
        self.embedding.len() as u64
            + self.pos_embedding.len() as u64
            + layers
            + self.final_gamma.len() as u64
            + self.final_beta.len() as u64
    }
}

/// Parameters in one layer for a given hidden width: 12 H^2 weights plus
/// 13 H of biases and layer-norm terms.
pub fn layer_param_count(hidden: usize) -> u64 {
    let h = hidden as u64;
    12 * h * h + 13 * h
}

/// One unit of inference work: a padded token matrix with true lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    /// Row-major [b, s_pad] token ids.
    pub token_ids: Vec<u32>,
    pub b: usize,
    pub s_pad: usize,
    pub seq_lens: Vec<usize>,
}

impl Batch {
    pub fn new(batch_id: u64, rows: Vec<Vec<u32>>, seq_lens: Vec<usize>) -> Result<Self> {
        let b = rows.len();
        let s_pad = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != s_pad) {
            return Err(Error::Validation("ragged token rows".into()));
        }
        let token_ids = rows.into_iter().flatten().collect();
        Ok(Batch {
            batch_id,
            token_ids,
            b,
            s_pad,
            seq_lens,
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.b < 1 || self.s_pad < 1 {
            return Err(Error::Validation("empty batch".into()));
        }
        if self.s_pad > cfg.max_seq {
            return Err(Error::Validation(format!(
                "batch {} padded length {} exceeds max_seq {}",
                self.batch_id, self.s_pad, cfg.max_seq
            )));
        }
        if self.seq_lens.len() != self.b {
            return Err(Error::Validation("seq_lens count != batch size".into()));
        }
        if self.token_ids.len() != self.b * self.s_pad {
            return Err(Error::Validation("token matrix size mismatch".into()));
        }
        for (i, &len) in self.seq_lens.iter().enumerate() {
            if len < 1 || len > self.s_pad {
                return Err(Error::Validation(format!(
                    "sequence {i} length {len} outside [1, {}]",
                    self.s_pad
                )));
            }
            for s in 0..self.s_pad {
                let id = self.token_ids[i * self.s_pad + s];
                if id as usize >= cfg.vocab_size {
                    return Err(Error::Validation(format!(
                        "token id {id} out of range for vocab {}",
                        cfg.vocab_size
                    )));
                }
                if s >= len && id != PAD_TOKEN {
                    return Err(Error::Validation(format!(
                        "padding position ({i},{s}) holds token {id}, expected pad id {PAD_TOKEN}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total valid (non-padding) tokens.
    pub fn valid_tokens(&self) -> usize {
        self.seq_lens.iter().sum()
    }

    /// The attention mask this batch implies under the model's causal flag:
    /// valid-length masking always, combined with causal when configured.
    pub fn mask(&self, causal: bool) -> AttentionMask {
        if causal {
            AttentionMask::causal_length_based(self.seq_lens.clone())
        } else {
            AttentionMask::length_based(self.seq_lens.clone())
        }
    }
}

/// Seeded batch with random lengths in [1, s_pad] and random valid tokens.
pub fn random_batch(cfg: &ModelConfig, batch_id: u64, b: usize, s_pad: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(b);
    let mut lens = Vec::with_capacity(b);
    for _ in 0..b {
        let len = rng.gen_range(1..=s_pad);
        let mut row = vec![PAD_TOKEN; s_pad];
        for slot in row.iter_mut().take(len) {
            *slot = rng.gen_range(0..cfg.vocab_size as u32);
        }
        rows.push(row);
        lens.push(len);
    }
    Batch::new(batch_id, rows, lens).expect("generated batch is well-formed")
}

fn fill_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::from_vec(shape, data).expect("uniform init is finite")
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(vec![n], vec![1.0; n]).unwrap()
}

/// Deterministically initialize all parameters from the config seed.
/// The same config and seed always give bit-identical parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let h = cfg.hidden();
    let f = cfg.ffn_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embedding = fill_uniform(&mut rng, vec![cfg.vocab_size, h]);
    let pos_embedding = fill_uniform(&mut rng, vec![cfg.max_seq, h]);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerParams {
            wq: fill_uniform(&mut rng, vec![h, h]),
            bq: fill_uniform(&mut rng, vec![h]),
            wk: fill_uniform(&mut rng, vec![h, h]),
            bk: fill_uniform(&mut rng, vec![h]),
            wv: fill_uniform(&mut rng, vec![h, h]),
            bv: fill_uniform(&mut rng, vec![h]),
            wo: fill_uniform(&mut rng, vec![h, h]),
            bo: fill_uniform(&mut rng, vec![h]),
            w1: fill_uniform(&mut rng, vec![h, f]),
            b1: fill_uniform(&mut rng, vec![f]),
            w2: fill_uniform(&mut rng, vec![f, h]),
            b2: fill_uniform(&mut rng, vec![h]),
            ln1_gamma: ones(h),
            ln1_beta: Tensor::zeros(vec![h]),
            ln2_gamma: ones(h),
            ln2_beta: Tensor::zeros(vec![h]),
        });
    }
    Ok(ModelParams {
        embedding,
        pos_embedding,
        layers,
        final_gamma: ones(h),
        final_beta: Tensor::zeros(vec![h]),
    })
}

/// Token + position embedding lookup producing [B, S_pad, H], given the
/// two tables directly (workers hold only their slices of the model).
pub fn embed_tokens(
    embedding: &Tensor,
    pos_embedding: &Tensor,
    token_ids: &[u32],
    b: usize,
    s_pad: usize,
) -> Result<Tensor> {
    let h = embedding.last_dim();
    let vocab = embedding.shape()[0];
    let max_seq = pos_embedding.shape()[0];
    if s_pad > max_seq {
        return Err(Error::Validation(format!(
            "padded length {s_pad} exceeds position table {max_seq}"
        )));
    }
    if token_ids.len() != b * s_pad {
        return Err(Error::Validation("token matrix size mismatch".into()));
    }
    let mut out = Tensor::zeros(vec![b, s_pad, h]);
    for bi in 0..b {
        for s in 0..s_pad {
            let id = token_ids[bi * s_pad + s] as usize;
            if id >= vocab {
                return Err(Error::Validation(format!(
                    "token id {id} out of range for vocab {vocab}"
                )));
            }
            let emb = embedding.row(id);
            let pos = pos_embedding.row(s);
            let dst_base = (bi * s_pad + s) * h;
            for c in 0..h {
                out.data_mut()[dst_base + c] = emb[c] + pos[c];
            }
        }
    }
    Ok(out)
}

/// Token + position embedding lookup producing [B, S_pad, H].
pub fn embed_batch(params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    embed_tokens(
        &params.embedding,
        &params.pos_embedding,
        &batch.token_ids,
        batch.b,
        batch.s_pad,
    )
}

/// One pre-norm transformer layer: x + attn(ln1(x)), then + mlp(ln2(.)).
pub fn transformer_layer_forward(
    x: &Tensor,
    layer: &LayerParams,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let normed = layer_norm(x, &layer.ln1_gamma, &layer.ln1_beta, LN_EPS)?;
    let attn = multi_head_attention(&normed, &layer.attention_weights(), heads, mask)?;
    let x = x.add(&attn)?;
    let normed = layer_norm(&x, &layer.ln2_gamma, &layer.ln2_beta, LN_EPS)?;
    let mlp = mlp_forward(&normed, &layer.w1, &layer.b1, &layer.w2, &layer.b2)?;
    x.add(&mlp)
}

/// Serial reference forward pass: embedding, layer stack, final norm.
pub fn serial_forward(cfg: &ModelConfig, params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    batch.validate(cfg)?;
    let mask = batch.mask(cfg.causal);
    let mut x = embed_batch(params, batch)?;
    for layer in &params.layers {
        x = transformer_layer_forward(&x, layer, cfg.num_heads, &mask)?;
    }
    layer_norm(&x, &params.final_gamma, &params.final_beta, LN_EPS)
}

/// Compare two outputs only at valid token positions, returning the largest
/// absolute difference there.
pub fn max_abs_diff_valid(a: &Tensor, b: &Tensor, batch: &Batch) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "max_abs_diff_valid",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let h = a.last_dim();
    let mut worst = 0.0f64;
    for bi in 0..batch.b {
        for s in 0..batch.seq_lens[bi] {
            let base = (bi * batch.s_pad + s) * h;
            for c in 0..h {
                worst = worst.max((a.data()[base + c] - b.data()[base + c]).abs());
            }
        }
    }
    Ok(worst)
}

// ---- checkpoint format ----------------------------------------------------
//
// One JSON header line with the ModelConfig, then every tensor's scalars as
// little-endian f64 in declaration order: embedding, position embedding,
// each layer (wq bq wk bk wv bv wo bo w1 b1 w2 b2 ln1_g ln1_b ln2_g ln2_b),
// final norm gamma then beta.

fn params_in_order(params: &ModelParams) -> Vec<&Tensor> {
    let mut out = vec![&params.embedding, &params.pos_embedding];
    for layer in &params.layers {
        out.extend(layer.tensors());
    }
    out.push(&params.final_gamma);
    out.push(&params.final_beta);
    out
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(cfg).map_err(|e| Error::Io(e.to_string()))?;
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for t in params_in_order(params) {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let cfg: ModelConfig =
        serde_json::from_str(header.trim_end()).map_err(|e| Error::Io(format!("bad header: {e}")))?;
    cfg.validate()?;

    let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Io(format!("truncated checkpoint: {e}")))?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    };

    let h = cfg.hidden();
    let f = cfg.ffn_dim();
    let embedding = read_tensor(vec![cfg.vocab_size, h])?;
    let pos_embedding = read_tensor(vec![cfg.max_seq, h])?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerParams {
            wq: read_tensor(vec![h, h])?,
            bq: read_tensor(vec![h])?,
            wk: read_tensor(vec![h, h])?,
            bk: read_tensor(vec![h])?,
            wv: read_tensor(vec![h, h])?,
            bv: read_tensor(vec![h])?,
            wo: read_tensor(vec![h, h])?,
            bo: read_tensor(vec![h])?,
            w1: read_tensor(vec![h, f])?,
            b1: read_tensor(vec![f])?,
            w2: read_tensor(vec![f, h])?,
            b2: read_tensor(vec![h])?,
            ln1_gamma: read_tensor(vec![h])?,
            ln1_beta: read_tensor(vec![h])?,
            ln2_gamma: read_tensor(vec![h])?,
            ln2_beta: read_tensor(vec![h])?,
        });
    }
    let final_gamma = read_tensor(vec![h])?;
    let final_beta = read_tensor(vec![h])?;
    let mut tail = Vec::new();
    r.read_to_end(&mut tail)?;
    if !tail.is_empty() {
        return Err(Error::Io(format!(
            "checkpoint has {} trailing bytes",
            tail.len()
        )));
    }
    Ok((
        cfg,
        ModelParams {
            embedding,
            pos_embedding,
            layers,
            final_gamma,
            final_beta,
        },
    ))
}
