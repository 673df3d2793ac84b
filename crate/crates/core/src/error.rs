use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid camera: scale must be positive and finite, got {0}")]
    InvalidCamera(f64),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("degenerate target: no visible joints")]
    DegenerateTarget,

    #[error("unfittable frame: {visible} visible joints, need at least {required}")]
    UnfittableFrame { visible: usize, required: usize },

    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("empty evaluation set")]
    EmptyReport,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Divergence-type errors map to a distinct CLI exit code.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
