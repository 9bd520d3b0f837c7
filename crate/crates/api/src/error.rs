use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gigaslide_store::StoreError;
use serde::Serialize;

use crate::pipeline::PipelineError;
use crate::reports::ReportError;

/// Error body shared by every route: `{"code": ..., "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct Body<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::Validation(_) => Self::validation(message),
            StoreError::Authorization(_) => Self::forbidden(message),
            StoreError::NotFound(_) => Self::not_found(message),
            StoreError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", message),
            StoreError::Sql(_) | StoreError::Corrupt(_) => {
                log::error!("store failure: {message}");
                Self::internal(message)
            }
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Store(s) => s.into(),
            PipelineError::Format(m) => Self::bad_request(m),
            PipelineError::Heatmap(h) => Self::validation(h.to_string()),
            PipelineError::Invalid(m) => Self::validation(m),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<ReportError> for ApiError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::UnknownKind(_) | ReportError::Filter(_) => Self::bad_request(e.to_string()),
            ReportError::Store(s) => s.into(),
            ReportError::Metric(m) => Self::validation(m.to_string()),
        }
    }
}

/// Malformed JSON is a 400; well-formed JSON of the wrong shape is a 422.
impl From<serde_json::Error> for ApiError {
    fn from(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => Self::bad_request(e.to_string()),
            Category::Data => Self::validation(e.to_string()),
        }
    }
}
