use std::path::PathBuf;

use thiserror::Error;

use crate::model::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("sequence of {len} tokens exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged: non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    /// Carries the last checkpoint whose parameters were all finite.
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String, last_good: Box<Model> },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{path}: record {record}: {msg}")]
    Load { path: PathBuf, record: usize, msg: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
