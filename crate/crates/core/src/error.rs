use thiserror::Error;

pub type Result<T> = std::result::Result<T, PwsError>;

#[derive(Debug, Error)]
pub enum PwsError {
    #[error("point has non-positive depth {depth} at motion value {value}")]
    NonPositiveDepth { depth: f64, value: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("partition interval {delta} does not exceed the analysis grid step {step}")]
    DegenerateInterval { delta: f64, step: f64 },

    #[error("one-frame margin is non-positive ({margin}); delta is too large for the scene")]
    NegativeMargin { margin: f64 },

    #[error("invalid partition interval {0}")]
    InvalidDelta(f64),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("argument outside the function domain: {0}")]
    DomainError(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("no covered pixel at the reference pose")]
    EmptyFrame,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },

    #[error("external classifier failed: {0}")]
    Subprocess(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PwsError {
    /// Stable machine-readable name used in CLI diagnostics and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            PwsError::NonPositiveDepth { .. } => "NonPositiveDepth",
            PwsError::ShapeMismatch { .. } => "ShapeMismatch",
            PwsError::DegenerateInterval { .. } => "DegenerateInterval",
            PwsError::NegativeMargin { .. } => "NegativeMargin",
            PwsError::InvalidDelta(_) => "InvalidDelta",
            PwsError::DegenerateDataset(_) => "DegenerateDataset",
            PwsError::DomainError(_) => "DomainError",
            PwsError::InvalidRange(_) => "InvalidRange",
            PwsError::EmptyFrame => "EmptyFrame",
            PwsError::InvalidInput(_) => "InvalidInput",
            PwsError::Format { .. } => "FormatError",
            PwsError::Subprocess(_) => "SubprocessError",
            PwsError::Io(_) => "IoError",
            PwsError::Json(_) => "JsonError",
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        PwsError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
