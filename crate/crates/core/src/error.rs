use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The filter prefactor `T / sum(theta)` is undefined.
    #[error("degenerate filter: |sum(theta)| = {sum:e} is below threshold")]
    DegenerateFilter { sum: f64 },

    #[error("degenerate lightness range: min = max = {value}")]
    DegenerateRange { value: f64 },

    #[error("invalid lightness range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("margin loss needs at least two classes")]
    SingleClass,

    #[error("empty set")]
    EmptySet,

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("inconsistent image dimensions: {path} is {got:?}, expected {expected:?}")]
    InconsistentDims {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("no images found under {0}")]
    EmptyDir(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed weights file: {0}")]
    MalformedWeights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
