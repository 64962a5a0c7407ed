//! Error type shared across the engine, with machine-parsable categories
//! for the CLI (`error: <category>: <message>`).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CxvError {
    /// Shape or rank mismatch between tensors; names both shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Invalid operation or configuration parameter (e.g. dropout p >= 1).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Bad runtime data (out-of-range label, accuracy outside [0,1], ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary input; `offset` is the first offending byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Newton-Schulz iteration produced a non-finite value.
    #[error("pseudoinverse diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    /// Kernel-attention denominator collapsed to zero for a query row.
    #[error("numerical degeneracy: attention denominator is zero at row {row}")]
    Degeneracy { row: usize },

    /// Config text failed to parse or validate; 1-based line number.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// API misuse (non-scalar loss, empty dataset, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint file missing, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss {value} at batch {batch}")]
    NonFiniteLoss { batch: usize, value: f64 },

    /// Optimizer step aborted on a non-finite gradient.
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGrad(String),
}

impl CxvError {
    /// Stable one-token category used in CLI error lines and exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            CxvError::Dim(_) => "tensor.shape",
            CxvError::Param(_) => "config.validate",
            CxvError::Data(_) => "data.value",
            CxvError::Format { .. } => "data.format",
            CxvError::Divergence { .. } => "numeric.divergence",
            CxvError::Degeneracy { .. } => "numeric.degeneracy",
            CxvError::Config { .. } => "config.parse",
            CxvError::Usage(_) => "usage",
            CxvError::Checkpoint(_) => "io.checkpoint",
            CxvError::Io(_) => "io",
            CxvError::NonFiniteLoss { .. } => "train.loss",
            CxvError::NonFiniteGrad(_) => "train.grad",
        }
    }
}

pub type Result<T> = std::result::Result<T, CxvError>;

/// Shorthand for shape-mismatch errors that must name both shapes.
pub fn dim_error(what: &str, a: &[usize], b: &[usize]) -> CxvError {
    CxvError::Dim(format!("{what}: {a:?} vs {b:?}"))
}
