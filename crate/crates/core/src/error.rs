//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- feature ingestion ----
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("class {class} has no samples (labels must cover 1..=C)")]
    EmptyClass { class: u32 },

    // ---- model persistence ----
    #[error("unsupported model file: {0}")]
    VersionMismatch(String),

    #[error("model payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumFailure { stored: u32, computed: u32 },

    // ---- graph construction ----
    #[error("class graph needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("k = {k} too large for {n} samples (need k <= n - 1)")]
    KTooLarge { k: usize, n: usize },

    #[error("epsilon_sigma must be positive, got {0}")]
    DegenerateScale(f64),

    // ---- spectral decomposition ----
    #[error("eigensolver failed to converge ({0})")]
    NoConvergence(String),

    // ---- landmark selection ----
    #[error("landmark count {count} below the k + 1 = {min} lower bound for class {class}")]
    CountTooSmall {
        class: u32,
        count: usize,
        min: usize,
    },

    // ---- training ----
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    // ---- configuration ----
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("query dimension {query} does not match model dimension {model}")]
    DimensionMismatch { query: usize, model: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
