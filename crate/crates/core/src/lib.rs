//! Desk-scale distributed inference runtime for transformer models.
//!
//! A centralized engine delegates sub-models to symmetric workers and
//! launches batches through commands; workers coordinate through a global
//! communication context. On top of that base the crate provides
//! non-blocking pipeline parallelism with an ordered consistency queue,
//! padding removal around the attention module, and a peer memory pool
//! with prefetch for parameters that do not fit the local device.

pub mod comm;
pub mod engine;
pub mod error;
pub mod mempool;
pub mod model;
pub mod packing;
pub mod pipeline;
pub mod sweep;
pub mod tensor;
pub mod tensor_parallel;
pub mod trace;

pub use engine::{initialize, PoolConfig, Runtime, RuntimeConfig};
pub use error::{Error, Result};
pub use model::{Batch, LayerParams, ModelConfig, ModelParams};
pub use pipeline::{ResultHandle, VirtualCost};
pub use tensor::{AttentionMask, Tensor};
