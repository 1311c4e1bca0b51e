//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: rating {rating} outside [{min}, {max}]")]
    RatingOutOfRange {
        path: String,
        line: usize,
        rating: f64,
        min: f64,
        max: f64,
    },

    #[error("dataset {0} contains no interactions")]
    EmptyDataset(String),

    #[error("dataset has {0} interactions, too few to split 80/10/10")]
    DatasetTooSmall(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("value {0} outside [0, 1]")]
    WeightOutOfRange(f64),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("{0} is not a checkpoint file")]
    NotACheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint metadata is corrupt: {0}")]
    CheckpointMetadata(String),

    #[error("checkpoint holds a {found} model, expected {expected}")]
    CheckpointKind { found: String, expected: String },

    #[error("checkpoint was trained on a different dataset: {0}")]
    FingerprintMismatch(String),

    #[error("split manifest is invalid: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
