//! Error type shared across the crate.

/// Crate-wide error enum. Variants are grouped so callers (notably the CLI)
/// can distinguish validation problems (bad config, bad shapes, bad inputs)
/// from runtime failures (diverged training, I/O, tensor backend errors).
#[derive(Debug, thiserror::Error)]
pub enum D2lError {
    /// Configuration or input failed validation before any work started.
    #[error("validation error: {0}")]
    Validation(String),
    /// A dimension constraint was violated (e.g. d_model not divisible by n_heads).
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A token budget (sequence length, packing budget) was exceeded.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    /// A serialized artifact is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// A serialized artifact failed its integrity check.
    #[error("checksum mismatch: {0}")]
    Checksum(String),
    /// A serialized artifact has an unsupported format version.
    #[error("unsupported version: {0}")]
    Version(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl D2lError {
    /// True for errors that indicate invalid configuration or inputs rather
    /// than a failure while doing the work. The CLI maps these to exit code 2
    /// and everything else to exit code 3.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            D2lError::Validation(_)
                | D2lError::InvalidDimension(_)
                | D2lError::ShapeMismatch(_)
                | D2lError::BudgetExceeded(_)
                | D2lError::Format(_)
                | D2lError::Checksum(_)
                | D2lError::Version(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, D2lError>;
