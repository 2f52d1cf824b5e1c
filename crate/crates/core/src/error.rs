use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum BdqError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported dimension {0}: must be a power of two")]
    UnsupportedDimension(usize),

    #[error("non-orthogonal rotation: max |R^T R - I| = {0:e}")]
    NonOrthogonal(f64),

    #[error("training diverged at epoch {0}")]
    Diverged(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BdqError>;

pub(crate) fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> BdqError {
    BdqError::Shape {
        expected: expected.into(),
        got: got.into(),
    }
}
