//! Error type shared across the crate.

/// Convenience alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, SlipError>;

/// Unified error for graph construction, tensor math, file I/O, and training.
#[derive(Debug, thiserror::Error)]
pub enum SlipError {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A text or binary file does not conform to its format.
    /// `line` is 1-based; 0 means the error is not tied to a single line.
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss; `step` is the failing step index.
    #[error("divergence at step {step}: non-finite loss")]
    Divergence { step: usize },

    /// Underlying filesystem failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SlipError {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SlipError::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a parse failure tied to a specific line.
    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        SlipError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
