//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor math, communication, and the runtime.
#[derive(Debug, Clone)]
pub enum Error {
    /// Two tensor shapes that must agree do not; names both shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A configuration value is invalid before anything starts running.
    Config(String),
    /// A request was rejected at validation time (bad batch, bad token id, ...).
    Validation(String),
    /// A communication or queue protocol rule was broken (duplicate tag,
    /// duplicate key, shape divergence inside a collective, ...).
    Protocol(String),
    /// A control-plane message could not be delivered to a worker.
    Delivery { worker: usize, reason: String },
    /// A pipeline stage failed while processing a batch key.
    StageFailure { key: u64, stage: usize, msg: String },
    /// A memory budget was exceeded during a pooled run.
    Budget {
        device: usize,
        layer: usize,
        resident: u64,
        capacity: u64,
    },
    /// The runtime is shut down and no longer accepts work.
    ShutDown,
    /// Wrapped I/O error (checkpoints, sockets, report files).
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Validation(msg) => write!(f, "validation failed: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol violation: {msg}"),
            Error::Delivery { worker, reason } => {
                write!(f, "delivery to worker {worker} failed: {reason}")
            }
            Error::StageFailure { key, stage, msg } => {
                write!(f, "stage {stage} failed on key {key}: {msg}")
            }
            Error::Budget {
                device,
                layer,
                resident,
                capacity,
            } => write!(
                f,
                "memory budget exceeded on device {device} loading layer {layer}: \
                 {resident} bytes resident, capacity {capacity}"
            ),
            Error::ShutDown => write!(f, "runtime is shut down"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
