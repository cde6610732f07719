use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown template {id}; valid ids: {valid:?}")]
    UnknownTemplate { id: usize, valid: Vec<usize> },
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) | ServiceError::UnknownTemplate { .. } => StatusCode::BAD_REQUEST,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<memeface_core::Error> for ServiceError {
    fn from(e: memeface_core::Error) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_template_ids: Option<Vec<usize>>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let valid_template_ids = match &self {
            ServiceError::UnknownTemplate { valid, .. } => Some(valid.clone()),
            _ => None,
        };
        let body = ErrorBody { error: self.to_string(), valid_template_ids };
        (self.status(), Json(body)).into_response()
    }
}
