use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use shadowopt_core::CoreError;

/// Wire form of every error response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    /// Error category: `validation`, `not_found`, `conflict`, `domain_rule`
    /// or `internal`.
    pub code: String,
    pub key: String,
    pub message: String,
    pub field_path: Option<String>,
}

#[derive(Clone, Debug, thiserror::Error)]
#[error("{} ({}): {}", .body.code, .body.key, .body.message)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: u16, code: &str, key: impl Into<String>, message: impl Into<String>, field_path: Option<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody { code: code.into(), key: key.into(), message: message.into(), field_path },
        }
    }

    pub fn validation(key: impl Into<String>, message: impl Into<String>, field_path: Option<String>) -> Self {
        Self::new(400, "validation", key, message, field_path)
    }

    pub fn not_found(kind: &str, id: &str) -> Self {
        Self::new(404, "not_found", format!("{kind}.not_found"), format!("no {kind} with id `{id}`"), None)
    }

    pub fn conflict(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(409, "conflict", key, message, None)
    }

    pub fn domain(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(422, "domain_rule", key, message, None)
    }

    pub fn too_large(limit: usize) -> Self {
        ApiError::new(413, "validation", "request.too_large", format!("request body exceeds {limit} bytes"), None)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "internal", "internal.error", message, None)
    }

    pub fn key(&self) -> &str {
        &self.body.key
    }

    /// Client-side mistakes, as opposed to failures of the service itself.
    pub fn is_client_error(&self) -> bool {
        (400..500).contains(&self.status)
    }
}

/// Parse errors and field-level validation map to 400; rule violations
/// without a field (empty dataset, untrained model, ...) map to 422.
impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let key = e.key().to_string();
        let field_path = e.field_path().map(str::to_string);
        match &e {
            CoreError::Parse { .. } => ApiError::validation(key, e.to_string(), field_path),
            CoreError::Validation { message, .. } if field_path.is_some() => {
                ApiError::validation(key, message.clone(), field_path)
            }
            CoreError::Validation { message, .. } => ApiError::domain(key, message.clone()),
            CoreError::Cancelled { .. } => ApiError::conflict(key, e.to_string()),
            CoreError::NonFiniteGradient { .. } => ApiError::domain(key, e.to_string()),
            CoreError::Invariant(_) | CoreError::Io(_) => ApiError::new(500, "internal", key, e.to_string(), None),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::new(500, "internal", "internal.io", e.to_string(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;
