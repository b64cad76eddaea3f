use thiserror::Error;

pub type Result<T, E = VbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VbError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tagger unavailable: {0}")]
    TaggerUnavailable(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported report schema version {0}")]
    UnsupportedSchema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VbError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VbError::InvalidInput(msg.into())
    }

    /// Errors caused by the input files rather than by estimation or the environment.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            VbError::Parse { .. }
                | VbError::Validation(_)
                | VbError::InvalidInput(_)
                | VbError::UnsupportedSchema(_)
                | VbError::Json(_)
        )
    }
}
