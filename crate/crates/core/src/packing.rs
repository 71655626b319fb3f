//! Redundant-computation elimination for padded batches: valid tokens from
//! all sequences are packed into one dense row block, so every linear layer
//! (and the layer norms and residual adds) runs on `T = sum(seq_lens)` rows
//! instead of `B * S_pad`. The attention scores still need the padded
//! layout, so q/k/v are unpacked around the attention core and the context
//! is packed again. Sequence lengths arrive with each engine command, so
//! under tensor parallelism every rank packs and unpacks locally.

use crate::comm::GlobalContext;
use crate::error::{Error, Result};
use crate::model::{LayerParams, LN_EPS};
use crate::tensor::{
    add_bias, attention_core, gelu_tensor, layer_norm, linear, linear_no_bias, AttentionMask,
    Tensor,
};
use crate::tensor_parallel::ShardedLayerParams;

/// Valid rows of a padded [B, S_pad, H] activation, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedActivations {
    /// [T, H] where T is the total valid token count.
    pub packed: Tensor,
    /// B+1 cumulative token counts; `offsets[i]..offsets[i+1]` is sequence i.
    pub offsets: Vec<usize>,
    /// Padded length of the original layout.
    pub s_pad: usize,
}

impl PackedActivations {
    /// Rebuild packed activations from a bare [T, H] tensor plus the
    /// sequence lengths that produced it (as carried by engine commands).
    pub fn from_tensor(packed: Tensor, seq_lens: &[usize], s_pad: usize) -> Result<Self> {
        let p = PackedActivations {
            packed,
            offsets: offsets_from_lens(seq_lens),
            s_pad,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn total_tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    fn validate(&self) -> Result<()> {
        if self.offsets.first() != Some(&0) {
            return Err(Error::Validation("offsets must start at 0".into()));
        }
        if self.offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("offsets must be strictly increasing".into()));
        }
        if self
            .offsets
            .windows(2)
            .any(|w| w[1] - w[0] > self.s_pad)
        {
            return Err(Error::Validation("sequence longer than padded length".into()));
        }
        if self.packed.leading_rows() != self.total_tokens() {
            return Err(Error::Validation(format!(
                "packed rows {} disagree with offsets total {}",
                self.packed.leading_rows(),
                self.total_tokens()
            )));
        }
        Ok(())
    }
}

fn offsets_from_lens(seq_lens: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(seq_lens.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &l in seq_lens {
        acc += l;
        offsets.push(acc);
    }
    offsets
}

/// Concatenate the first `seq_lens[i]` rows of each sequence; padding
/// content is discarded.
pub fn pack(x: &Tensor, seq_lens: &[usize]) -> Result<PackedActivations> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "pack",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    let (b, s_pad, h) = (shape[0], shape[1], shape[2]);
    if seq_lens.len() != b {
        return Err(Error::Validation(format!(
            "{} lengths for batch of {b}",
            seq_lens.len()
        )));
    }
    if let Some(&bad) = seq_lens.iter().find(|&&l| l < 1 || l > s_pad) {
        return Err(Error::Validation(format!(
            "sequence length {bad} outside [1, {s_pad}]"
        )));
    }
    let offsets = offsets_from_lens(seq_lens);
    let total = *offsets.last().unwrap();
    let mut data = Vec::with_capacity(total * h);
    for (bi, &len) in seq_lens.iter().enumerate() {
        let start = bi * s_pad * h;
        data.extend_from_slice(&x.data()[start..start + len * h]);
    }
    Ok(PackedActivations {
        packed: Tensor::from_vec(vec![total, h], data)?,
        offsets,
        s_pad,
    })
}

/// Restore the padded [B, S_pad, H] layout: valid rows in place, padding
/// rows exactly zero.
pub fn unpack(p: &PackedActivations) -> Result<Tensor> {
    p.validate()?;
    let b = p.batch_size();
    let h = p.packed.last_dim();
    let mut out = Tensor::zeros(vec![b, p.s_pad, h]);
    for bi in 0..b {
        let len = p.offsets[bi + 1] - p.offsets[bi];
        let src = p.offsets[bi] * h;
        let dst = bi * p.s_pad * h;
        out.data_mut()[dst..dst + len * h]
            .copy_from_slice(&p.packed.data()[src..src + len * h]);
    }
    Ok(out)
}

/// Fraction of linear-layer work left after packing: T / (B * S_pad).
pub fn valid_token_ratio(b: usize, s_pad: usize, seq_lens: &[usize]) -> f64 {
    let total: usize = seq_lens.iter().sum();
    total as f64 / (b * s_pad) as f64
}

struct PackedLayerRefs<'a> {
    wq: &'a Tensor,
    bq: &'a Tensor,
    wk: &'a Tensor,
    bk: &'a Tensor,
    wv: &'a Tensor,
    bv: &'a Tensor,
    wo: &'a Tensor,
    bo: &'a Tensor,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
    ln1_gamma: &'a Tensor,
    ln1_beta: &'a Tensor,
    ln2_gamma: &'a Tensor,
    ln2_beta: &'a Tensor,
    local_heads: usize,
}

/// Layer forward on packed rows. Norms, projections, MLP, and residuals run
/// on [T, H]; only the attention core sees the padded layout. When `ctx` is
/// present the second linear of each module pair is reduced across the
/// tensor-parallel group before its replicated bias.
fn packed_layer_core(
    ctx: Option<&GlobalContext>,
    p: &PackedActivations,
    w: &PackedLayerRefs<'_>,
    mask: &AttentionMask,
) -> Result<PackedActivations> {
    p.validate()?;
    let b = p.batch_size();
    let reduce = |t: Tensor| -> Result<Tensor> {
        match ctx {
            Some(c) => c.all_reduce_sum(t),
            None => Ok(t),
        }
    };

    let n1 = layer_norm(&p.packed, w.ln1_gamma, w.ln1_beta, LN_EPS)?;
    let q = linear(&n1, w.wq, w.bq)?;
    let k = linear(&n1, w.wk, w.bk)?;
    let v = linear(&n1, w.wv, w.bv)?;
    let lift = |t: Tensor| -> Result<Tensor> {
        unpack(&PackedActivations {
            packed: t,
            offsets: p.offsets.clone(),
            s_pad: p.s_pad,
        })
    };
    let q = lift(q)?;
    let k = lift(k)?;
    let v = lift(v)?;
    let ctx_padded = attention_core(&q, &k, &v, b, p.s_pad, w.local_heads, mask)?;
    let lens: Vec<usize> = p.offsets.windows(2).map(|w| w[1] - w[0]).collect();
    let ctx_packed = pack(&ctx_padded, &lens)?;
    let proj = add_bias(&reduce(linear_no_bias(&ctx_packed.packed, w.wo)?)?, w.bo)?;
    let x = p.packed.add(&proj)?;

    let n2 = layer_norm(&x, w.ln2_gamma, w.ln2_beta, LN_EPS)?;
    let hidden = linear(&n2, w.w1, w.b1)?;
    let act = gelu_tensor(&hidden)?;
    let out = add_bias(&reduce(linear_no_bias(&act, w.w2)?)?, w.b2)?;
    let x = x.add(&out)?;
    Ok(PackedActivations {
        packed: x,
        offsets: p.offsets.clone(),
        s_pad: p.s_pad,
    })
}

/// Packed transformer layer, serial parameters.
pub fn packed_layer_forward(
    p: &PackedActivations,
    layer: &LayerParams,
    heads: usize,
    mask: &AttentionMask,
) -> Result<PackedActivations> {
    packed_layer_core(
        None,
        p,
        &PackedLayerRefs {
            wq: &layer.wq,
            bq: &layer.bq,
            wk: &layer.wk,
            bk: &layer.bk,
            wv: &layer.wv,
            bv: &layer.bv,
            wo: &layer.wo,
            bo: &layer.bo,
            w1: &layer.w1,
            b1: &layer.b1,
            w2: &layer.w2,
            b2: &layer.b2,
            ln1_gamma: &layer.ln1_gamma,
            ln1_beta: &layer.ln1_beta,
            ln2_gamma: &layer.ln2_gamma,
            ln2_beta: &layer.ln2_beta,
            local_heads: heads,
        },
        mask,
    )
}

/// Packed transformer layer on one tensor-parallel shard. Collective like
/// [`crate::tensor_parallel::tp_layer_forward`]: exactly two all-reduces.
pub fn packed_layer_forward_tp(
    ctx: &GlobalContext,
    p: &PackedActivations,
    shard: &ShardedLayerParams,
    mask: &AttentionMask,
) -> Result<PackedActivations> {
    packed_layer_core(
        Some(ctx),
        p,
        &PackedLayerRefs {
            wq: &shard.wq,
            bq: &shard.bq,
            wk: &shard.wk,
            bk: &shard.bk,
            wv: &shard.wv,
            bv: &shard.bv,
            wo: &shard.wo,
            bo: &shard.bo,
            w1: &shard.w1,
            b1: &shard.b1,
            w2: &shard.w2,
            b2: &shard.b2,
            ln1_gamma: &shard.ln1_gamma,
            ln1_beta: &shard.ln1_beta,
            ln2_gamma: &shard.ln2_gamma,
            ln2_beta: &shard.ln2_beta,
            local_heads: shard.local_heads,
        },
        mask,
    )
}
