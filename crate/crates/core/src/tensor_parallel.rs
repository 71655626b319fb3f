//! 1-D sharded transformer layer: the first linear of each module pair is
//! split by columns, the second by rows, attention by whole heads. One
//! accumulation per module pair, so a layer costs exactly two all-reduces.

use crate::comm::GlobalContext;
use crate::error::{Error, Result};
use crate::model::{LayerParams, LN_EPS};
use crate::tensor::{
    add_bias, attention_core, gelu_tensor, layer_norm, linear, linear_no_bias, AttentionMask,
    Tensor,
};

/// One rank's slice of a transformer layer.
///
/// Column shards (wq/wk/wv/w1 and their biases) cover this rank's output
/// features; row shards (wo/w2) cover the matching input features. The
/// second-linear biases and the layer-norm parameters are replicated and
/// applied identically on every rank after the reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedLayerParams {
    pub tp_rank: usize,
    pub tp_size: usize,
    /// Heads owned by this rank.
    pub local_heads: usize,
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

impl ShardedLayerParams {
    pub fn param_count(&self) -> u64 {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ln1_gamma, &self.ln1_beta,
            &self.ln2_gamma, &self.ln2_beta,
        ]
        .iter()
        .map(|t| t.len() as u64)
        .sum()
    }

    pub fn byte_len(&self) -> u64 {
        self.param_count() * 8
    }
}

fn split_cols(t: &Tensor, tp_size: usize) -> Vec<Tensor> {
    let n = t.last_dim();
    let chunk = n / tp_size;
    (0..tp_size)
        .map(|r| t.slice_cols(r * chunk, (r + 1) * chunk))
        .collect()
}

fn split_rows(t: &Tensor, tp_size: usize) -> Vec<Tensor> {
    let rows = t.shape()[0];
    let chunk = rows / tp_size;
    (0..tp_size)
        .map(|r| t.slice_rows(r * chunk, (r + 1) * chunk))
        .collect()
}

fn split_vec(t: &Tensor, tp_size: usize) -> Vec<Tensor> {
    let n = t.shape()[0];
    let chunk = n / tp_size;
    (0..tp_size)
        .map(|r| {
            Tensor::from_vec(
                vec![chunk],
                t.data()[r * chunk..(r + 1) * chunk].to_vec(),
            )
            .unwrap()
        })
        .collect()
}

/// Split a full layer into `tp_size` shards. Head boundaries are respected:
/// attention projections are split by whole heads, the MLP by even
/// contiguous feature blocks.
pub fn shard_params(layer: &LayerParams, heads: usize, tp_size: usize) -> Result<Vec<ShardedLayerParams>> {
    let f = layer.w1.last_dim();
    if tp_size == 0 || heads % tp_size != 0 || f % tp_size != 0 {
        return Err(Error::Config(format!(
            "cannot shard {heads} heads / ffn {f} across tp {tp_size}"
        )));
    }
    let wq = split_cols(&layer.wq, tp_size);
    let bq = split_vec(&layer.bq, tp_size);
    let wk = split_cols(&layer.wk, tp_size);
    let bk = split_vec(&layer.bk, tp_size);
    let wv = split_cols(&layer.wv, tp_size);
    let bv = split_vec(&layer.bv, tp_size);
    let wo = split_rows(&layer.wo, tp_size);
    let w1 = split_cols(&layer.w1, tp_size);
    let b1 = split_vec(&layer.b1, tp_size);
    let w2 = split_rows(&layer.w2, tp_size);
    Ok((0..tp_size)
        .map(|r| ShardedLayerParams {
            tp_rank: r,
            tp_size,
            local_heads: heads / tp_size,
            wq: wq[r].clone(),
            bq: bq[r].clone(),
            wk: wk[r].clone(),
            bk: bk[r].clone(),
            wv: wv[r].clone(),
            bv: bv[r].clone(),
            wo: wo[r].clone(),
            bo: layer.bo.clone(),
            w1: w1[r].clone(),
            b1: b1[r].clone(),
            w2: w2[r].clone(),
            b2: layer.b2.clone(),
            ln1_gamma: layer.ln1_gamma.clone(),
            ln1_beta: layer.ln1_beta.clone(),
            ln2_gamma: layer.ln2_gamma.clone(),
            ln2_beta: layer.ln2_beta.clone(),
        })
        .collect())
}

/// Sharded MLP: local column-linear, GELU, local row-linear, one all-reduce,
/// then the replicated bias. Collective: all tensor-parallel ranks call with
/// identical input and all receive the identical result.
pub fn tp_mlp_forward(ctx: &GlobalContext, x: &Tensor, shard: &ShardedLayerParams) -> Result<Tensor> {
    let hidden = linear(x, &shard.w1, &shard.b1)?;
    let act = gelu_tensor(&hidden)?;
    let partial = linear_no_bias(&act, &shard.w2)?;
    let reduced = ctx.all_reduce_sum(partial)?;
    add_bias(&reduced, &shard.b2)
}

/// Sharded attention: q/k/v for the owned heads, local attention, row-split
/// output projection, one all-reduce, then the replicated output bias.
pub fn tp_attention_forward(
    ctx: &GlobalContext,
    x: &Tensor,
    shard: &ShardedLayerParams,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "tp_attention_forward",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    let (b, s) = (shape[0], shape[1]);
    let q = linear(x, &shard.wq, &shard.bq)?;
    let k = linear(x, &shard.wk, &shard.bk)?;
    let v = linear(x, &shard.wv, &shard.bv)?;
    let ctx_local = attention_core(&q, &k, &v, b, s, shard.local_heads, mask)?;
    let partial = linear_no_bias(&ctx_local, &shard.wo)?;
    let reduced = ctx.all_reduce_sum(partial)?;
    add_bias(&reduced, &shard.bo)
}

/// Sharded transformer layer with the usual residual structure. Exactly two
/// all-reduces per call: one after attention, one after the MLP.
pub fn tp_layer_forward(
    ctx: &GlobalContext,
    x: &Tensor,
    shard: &ShardedLayerParams,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let normed = layer_norm(x, &shard.ln1_gamma, &shard.ln1_beta, LN_EPS)?;
    let attn = tp_attention_forward(ctx, &normed, shard, mask)?;
    let x = x.add(&attn)?;
    let normed = layer_norm(&x, &shard.ln2_gamma, &shard.ln2_beta, LN_EPS)?;
    let mlp = tp_mlp_forward(ctx, &normed, shard)?;
    x.add(&mlp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::init_contexts;
    use crate::model::{build_model, transformer_layer_forward, ModelConfig};
    use crate::tensor::{mlp_forward, multi_head_attention};
    use std::sync::Arc;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            head_dim: 2,
            vocab_size: 16,
            max_seq: 8,
            causal: true,
            seed,
        }
    }

    fn rand_x(b: usize, s: usize, h: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![b, s, h],
            (0..b * s * h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Run `f(ctx, shard)` on one thread per tensor-parallel rank and
    /// collect the per-rank outputs.
    fn run_tp<F>(tp: usize, shards: Vec<ShardedLayerParams>, f: F) -> Vec<Tensor>
    where
        F: Fn(&GlobalContext, &ShardedLayerParams) -> Result<Tensor> + Send + Sync + 'static,
    {
        let ctxs = init_contexts(tp, tp, 1).unwrap();
        let f = Arc::new(f);
        let mut joins = Vec::new();
        for (ctx, shard) in ctxs.into_iter().zip(shards) {
            let f = f.clone();
            joins.push(std::thread::spawn(move || f(&ctx, &shard).unwrap()));
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    }

    #[test]
    fn tp1_shard_is_the_original_layer() {
        let params = build_model(&cfg(17)).unwrap();
        let layer = &params.layers[0];
        let shards = shard_params(layer, 4, 1).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].wq, layer.wq);
        assert_eq!(shards[0].w2, layer.w2);
        assert_eq!(shards[0].b1, layer.b1);
    }

    #[test]
    fn shard_shapes_split_columns_and_rows() {
        let params = build_model(&cfg(17)).unwrap();
        let layer = &params.layers[0];
        // hidden 8, ffn 32
        let shards = shard_params(layer, 4, 2).unwrap();
        assert_eq!(shards[0].w1.shape(), &[8, 16]);
        assert_eq!(shards[1].w1.shape(), &[8, 16]);
        assert_eq!(shards[0].w2.shape(), &[16, 8]);
        assert_eq!(shards[0].wq.shape(), &[8, 4]);
        assert_eq!(shards[0].wo.shape(), &[4, 8]);
        assert_eq!(shards[0].local_heads, 2);
    }

    #[test]
    fn shards_reconstruct_the_original_bitwise() {
        let params = build_model(&cfg(21)).unwrap();
        let layer = &params.layers[1];
        for tp in [1, 2, 4] {
            let shards = shard_params(layer, 4, tp).unwrap();
            // concatenate column shards of w1 along columns
            let h = layer.w1.shape()[0];
            let f = layer.w1.last_dim();
            let chunk = f / tp;
            let mut w1 = vec![0.0; h * f];
            for (r, s) in shards.iter().enumerate() {
                for row in 0..h {
                    for c in 0..chunk {
                        w1[row * f + r * chunk + c] = s.w1.data()[row * chunk + c];
                    }
                }
            }
            assert_eq!(w1, layer.w1.data());
            // stack row shards of w2 along rows
            let mut w2 = Vec::new();
            for s in &shards {
                w2.extend_from_slice(s.w2.data());
            }
            assert_eq!(w2, layer.w2.data());
        }
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let params = build_model(&cfg(3)).unwrap();
        assert!(shard_params(&params.layers[0], 4, 3).is_err());
    }

    #[test]
    fn tp1_mlp_equals_serial_bitwise() {
        let params = build_model(&cfg(17)).unwrap();
        let layer = params.layers[0].clone();
        let x = rand_x(1, 2, 8, 40);
        let want = mlp_forward(&x, &layer.w1, &layer.b1, &layer.w2, &layer.b2).unwrap();
        let shards = shard_params(&layer, 4, 1).unwrap();
        let x2 = x.clone();
        let got = run_tp(1, shards, move |ctx, shard| tp_mlp_forward(ctx, &x2, shard));
        assert_eq!(got[0].data(), want.data());
    }

    #[test]
    fn tp2_mlp_matches_serial_oracle() {
        let params = build_model(&ModelConfig { seed: 17, ..cfg(17) }).unwrap();
        let layer = params.layers[0].clone();
        let x = rand_x(1, 2, 8, 41);
        let want = mlp_forward(&x, &layer.w1, &layer.b1, &layer.w2, &layer.b2).unwrap();
        let shards = shard_params(&layer, 4, 2).unwrap();
        let x2 = x.clone();
        let got = run_tp(2, shards, move |ctx, shard| tp_mlp_forward(ctx, &x2, shard));
        for out in &got {
            assert!(out.max_abs_diff(&want).unwrap() < 1e-9);
        }
        // post-reduce activations identical across ranks
        assert_eq!(got[0].data(), got[1].data());
    }

    #[test]
    fn tp_mlp_counts_one_all_reduce() {
        let params = build_model(&cfg(17)).unwrap();
        let layer = params.layers[0].clone();
        let ctxs = init_contexts(1, 1, 1).unwrap();
        let shards = shard_params(&layer, 4, 1).unwrap();
        let x = rand_x(1, 2, 8, 42);
        tp_mlp_forward(&ctxs[0], &x, &shards[0]).unwrap();
        assert_eq!(ctxs[0].counters().snapshot().all_reduce, 1);
    }

    #[test]
    fn tp_attention_matches_serial_across_shard_counts() {
        let params = build_model(&ModelConfig { seed: 21, ..cfg(21) }).unwrap();
        let layer = params.layers[0].clone();
        let x = rand_x(2, 4, 8, 43);
        let mask = AttentionMask::causal();
        let want = multi_head_attention(&x, &layer.attention_weights(), 4, &mask).unwrap();
        for tp in [1, 2, 4] {
            let shards = shard_params(&layer, 4, tp).unwrap();
            let x2 = x.clone();
            let mask2 = mask.clone();
            let got = run_tp(tp, shards, move |ctx, shard| {
                tp_attention_forward(ctx, &x2, shard, &mask2)
            });
            for out in &got {
                assert!(
                    out.max_abs_diff(&want).unwrap() < 1e-9,
                    "tp={tp} diverged from serial attention"
                );
            }
        }
    }

    #[test]
    fn tp_layer_two_all_reduces_and_serial_match() {
        let params = build_model(&cfg(13)).unwrap();
        let layer = params.layers[0].clone();
        let x = rand_x(2, 3, 8, 44);
        let mask = AttentionMask::causal();
        let want = transformer_layer_forward(&x, &layer, 4, &mask).unwrap();

        let ctxs = init_contexts(2, 2, 1).unwrap();
        let shards = shard_params(&layer, 4, 2).unwrap();
        let mut joins = Vec::new();
        for (ctx, shard) in ctxs.into_iter().zip(shards) {
            let x = x.clone();
            let mask = mask.clone();
            joins.push(std::thread::spawn(move || {
                let out = tp_layer_forward(&ctx, &x, &shard, &mask).unwrap();
                (out, ctx.counters().snapshot().all_reduce)
            }));
        }
        for j in joins {
            let (out, reduces) = j.join().unwrap();
            assert_eq!(reduces, 2, "one sync point per module pair");
            assert!(out.max_abs_diff(&want).unwrap() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_make_the_layer_an_identity() {
        let h = 8;
        let f = 32;
        let zero = LayerParams {
            wq: Tensor::zeros(vec![h, h]),
            bq: Tensor::zeros(vec![h]),
            wk: Tensor::zeros(vec![h, h]),
            bk: Tensor::zeros(vec![h]),
            wv: Tensor::zeros(vec![h, h]),
            bv: Tensor::zeros(vec![h]),
            wo: Tensor::zeros(vec![h, h]),
            bo: Tensor::zeros(vec![h]),
            w1: Tensor::zeros(vec![h, f]),
            b1: Tensor::zeros(vec![f]),
            w2: Tensor::zeros(vec![f, h]),
            b2: Tensor::zeros(vec![h]),
            ln1_gamma: Tensor::zeros(vec![h]),
            ln1_beta: Tensor::zeros(vec![h]),
            ln2_gamma: Tensor::zeros(vec![h]),
            ln2_beta: Tensor::zeros(vec![h]),
        };
        let x = rand_x(1, 3, h, 45);
        let shards = shard_params(&zero, 4, 2).unwrap();
        let x2 = x.clone();
        let got = run_tp(2, shards, move |ctx, shard| {
            tp_layer_forward(ctx, &x2, shard, &AttentionMask::none())
        });
        for out in got {
            assert_eq!(out.data(), x.data());
        }
    }
}
