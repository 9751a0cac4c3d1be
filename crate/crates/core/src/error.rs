use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A recorded loss (or another scalar that must be finite) was not.
    /// Carries the index and kind of the first non-finite tape node so the
    /// offending sub-expression can be located.
    #[error("gradient error: first non-finite value at tape node {node} ({op})")]
    Gradient { node: usize, op: &'static str },

    #[error("model divergence: {0}")]
    ModelDivergence(String),

    #[error("filter diverged at step {step}: {reason}")]
    FilterDivergence { step: usize, reason: String },

    #[error("loss error at timestep {t}: {reason}")]
    Loss { t: usize, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
