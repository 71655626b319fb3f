//! Shared fixtures for the criterion micro-benchmarks.

use tandem::model::ModelConfig;

/// Small model used across benches: 4 layers, hidden width 32.
pub fn bench_model(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        num_heads: 4,
        head_dim: 8,
        vocab_size: 64,
        max_seq: 64,
        causal: true,
        seed,
    }
}
