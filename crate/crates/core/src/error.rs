//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree with an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A file did not match its documented format.
    #[error("format error: {0}")]
    Format(String),

    /// An API contract was violated (caller bug, not bad data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A class label had no in-vocabulary tokens.
    #[error("label {0:?} has no tokens covered by the word-vector table")]
    Coverage(String),

    /// Seen and unseen label sets overlap.
    #[error("seen/unseen label sets are not disjoint: {0:?} appears in both")]
    Disjointness(String),

    /// An attention mask deviates from its scheme's rules.
    #[error("attention mask violation at query {q}, key {k}: {reason}")]
    MaskValidation { q: usize, k: usize, reason: String },

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A class index is outside the valid range.
    #[error("index error: {0}")]
    Index(String),

    /// The instance is too large for exhaustive enumeration.
    #[error("instance too large for exhaustive search: {0}")]
    Scale(String),

    /// Prototype composition is numerically ill-posed.
    #[error("composition error: {0}")]
    Composition(String),

    /// Cross-validation fold construction failed.
    #[error("cross-validation error: {0}")]
    Fold(String),

    /// The evaluation protocol cannot run on the given inputs.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A checkpoint could not be read back.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
