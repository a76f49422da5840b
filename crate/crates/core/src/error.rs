//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Residual construction when target and draft agree everywhere. The
    /// rejection path can never reach this state (a rejected token always has
    /// positive rejection mass), so seeing it means the caller fed
    /// inconsistent distributions.
    #[error("degenerate residual: target and draft distributions are identical")]
    DegenerateResidual,

    #[error("no data to aggregate: {0}")]
    EmptyInput(String),

    #[error("training data contains a single class")]
    DegenerateDataset,

    #[error("AUC undefined: evaluation set contains a single class")]
    UndefinedAuc,

    #[error("outcome space too large to enumerate: {0}")]
    NotEnumerable(String),

    #[error("feature extraction failed: {0}")]
    FeatureExtraction(String),

    #[error("schema mismatch: expected {expected:?}, found {found:?}")]
    SchemaMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
