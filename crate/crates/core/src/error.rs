//! Crate-wide error type.

/// Errors surfaced by tensor ops, model assembly, data generation and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that had to agree did not. Names the op and both shapes.
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape violated an op's contract (wrong rank, zero extent, ...).
    #[error("{op}: bad shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Invalid configuration (model, training, phantom spec, CLI arguments).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Autodiff misuse: non-scalar loss, repeated backward, detached graph.
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// A file had the wrong format (TFT header, manifest, checkpoint layout).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Verification (grad check or invariant suite) failed.
    #[error("verification failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
