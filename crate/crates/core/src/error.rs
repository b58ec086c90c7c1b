use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BtmError {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("value {value} at index {index} is not positive; generalized mean with p = {p} needs sanitized recalls")]
    NonPositive { index: usize, value: f64, p: f64 },

    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("architecture mismatch: {left:?} vs {right:?}")]
    ArchitectureMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("insufficient samples in class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid long-tail spec: {0}")]
    InvalidLongTail(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("targets not normalized: row {row} sums to {sum}")]
    TargetsNotNormalized { row: usize, sum: f64 },

    #[error("score {score} at index {index} must be positive")]
    NonPositiveScore { index: usize, score: f64 },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadIdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedIdx {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX sample count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("bad container: {0}")]
    BadContainer(String),

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BtmError> = std::result::Result<T, E>;
