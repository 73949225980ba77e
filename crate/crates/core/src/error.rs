use thiserror::Error;

/// Errors raised by the domain operations.
///
/// `key` values are stable identifiers (e.g. `"parameter.out_of_bounds"`)
/// that the service forwards to clients and the UI maps to text.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{message}")]
    Validation {
        key: String,
        message: String,
        field_path: Option<String>,
    },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("cancelled after {completed} completed steps")]
    Cancelled { completed: usize },

    #[error("non-finite gradient at optimization iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Validation {
            key: key.into(),
            message: message.into(),
            field_path: None,
        }
    }

    pub fn validation_at(
        key: impl Into<String>,
        message: impl Into<String>,
        field_path: impl Into<String>,
    ) -> Self {
        CoreError::Validation {
            key: key.into(),
            message: message.into(),
            field_path: Some(field_path.into()),
        }
    }

    /// Stable message key for this error.
    pub fn key(&self) -> &str {
        match self {
            CoreError::Validation { key, .. } => key,
            CoreError::Parse { .. } => "request.malformed",
            CoreError::Invariant(_) => "internal.invariant",
            CoreError::Cancelled { .. } => "job.cancelled",
            CoreError::NonFiniteGradient { .. } => "optimization.non_finite_gradient",
            CoreError::Io(_) => "internal.io",
        }
    }

    pub fn field_path(&self) -> Option<&str> {
        match self {
            CoreError::Validation { field_path, .. } => field_path.as_deref(),
            CoreError::Parse { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, CoreError::Validation { .. } | CoreError::Parse { .. })
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
