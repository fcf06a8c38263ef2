use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: batch of {batch} is degenerate (train-mode batch statistics need at least 2 samples)")]
    DegenerateBatch { op: &'static str, batch: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("epoch error: {0}")]
    Epoch(String),

    #[error("pair error: {0}")]
    Pair(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}: payload length mismatch: expected {expected} bytes, got {actual}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: unknown format tag {tag:?}")]
    UnknownFormat { path: PathBuf, tag: String },

    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training step failed at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
