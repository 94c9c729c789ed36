use thiserror::Error;

pub type Result<T> = std::result::Result<T, GcmError>;

#[derive(Debug, Error)]
pub enum GcmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("model definition error: {0}")]
    Definition(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    /// The observed clicks have zero probability under the model.
    #[error("degenerate likelihood in session {session} at position {position}")]
    Degenerate { session: usize, position: usize },

    #[error("non-finite value for parameter `{parameter}` at iteration {iteration}: {detail}")]
    NonFinite {
        parameter: String,
        iteration: usize,
        detail: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcmError {
    pub(crate) fn definition(msg: impl Into<String>) -> Self {
        GcmError::Definition(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        GcmError::Schema(msg.into())
    }
}
