//! Error taxonomy shared by all modules.
//!
//! Every fallible operation returns [`Result`]. Variants are deliberately
//! coarse: they classify *what kind* of contract was violated so that callers
//! (and the CLI exit-code mapping) can react mechanically, while the message
//! carries the specifics.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FbmError>;

#[derive(Debug, Error)]
pub enum FbmError {
    /// Array or layer shapes do not chain.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A binary container does not follow its declared layout.
    #[error("format error: {0}")]
    Format(String),

    /// A file or buffer ended before its declared payload.
    #[error("length error: {0}")]
    Length(String),

    /// A collection is too small (or empty) for the requested operation.
    #[error("size error: {0}")]
    Size(String),

    /// A class label lies outside the expected range.
    #[error("label error: {0}")]
    Label(String),

    /// A sequence that must be sorted is not.
    #[error("order error: {0}")]
    Order(String),

    /// A computation produced non-finite values or an impossible quantity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative scheme left its stable region (e.g. a message-passing
    /// denominator turned non-positive).
    #[error("stability error: {0}")]
    Stability(String),

    /// An iterative solver exhausted its budget; carries the last residual so
    /// the caller can judge how far from a fixed point it stopped.
    #[error("convergence error: {message} (residual {residual:.3e} after {iterations} iterations)")]
    Convergence {
        message: String,
        residual: f64,
        iterations: usize,
    },

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Two artifacts that should be comparable are not.
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl FbmError {
    /// Stable machine-readable category name (used by the CLI error output).
    pub fn category(&self) -> &'static str {
        match self {
            FbmError::Dimension(_) => "dimension",
            FbmError::Format(_) => "format",
            FbmError::Length(_) => "length",
            FbmError::Size(_) => "size",
            FbmError::Label(_) => "label",
            FbmError::Order(_) => "order",
            FbmError::Numeric(_) => "numeric",
            FbmError::Stability(_) => "stability",
            FbmError::Convergence { .. } => "convergence",
            FbmError::Config(_) => "config",
            FbmError::Comparison(_) => "comparison",
            FbmError::Io(_) => "io",
            FbmError::Serde(_) => "serde",
        }
    }
}
