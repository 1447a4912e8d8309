use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use wbal_core::{Error, FieldError};

use crate::session::Stage;

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    /// The call needs the session to have reached `required`.
    Conflict { required: Stage, current: Stage },
    Unprocessable { message: String, fields: Vec<FieldError> },
    TooLarge(String),
    BadRequest(String),
    Internal(String),
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    required_stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    current_stage: Option<Stage>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fields: Vec<FieldError>,
}

impl ApiError {
    pub fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::Unprocessable {
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        let f = FieldError::new(field, message);
        ApiError::Unprocessable {
            message: f.to_string(),
            fields: vec![f],
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } => StatusCode::CONFLICT,
            ApiError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(fields) => ApiError::Unprocessable {
                message: Error::Validation(fields.clone()).to_string(),
                fields,
            },
            Error::UnknownColumn(ref c) => {
                let message = e.to_string();
                ApiError::Unprocessable {
                    fields: vec![FieldError::new(c.clone(), "no such column")],
                    message,
                }
            }
            other => ApiError::unprocessable(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = match self {
            ApiError::NotFound(m) => Body {
                error: "not_found",
                message: m,
                required_stage: None,
                current_stage: None,
                fields: Vec::new(),
            },
            ApiError::Conflict { required, current } => Body {
                error: "stage_conflict",
                message: format!("this step requires stage {required}; the session is at {current}"),
                required_stage: Some(required),
                current_stage: Some(current),
                fields: Vec::new(),
            },
            ApiError::Unprocessable { message, fields } => Body {
                error: "invalid",
                message,
                required_stage: None,
                current_stage: None,
                fields,
            },
            ApiError::TooLarge(m) => Body {
                error: "too_large",
                message: m,
                required_stage: None,
                current_stage: None,
                fields: Vec::new(),
            },
            ApiError::BadRequest(m) => Body {
                error: "bad_request",
                message: m,
                required_stage: None,
                current_stage: None,
                fields: Vec::new(),
            },
            ApiError::Internal(m) => Body {
                error: "internal",
                message: m,
                required_stage: None,
                current_stage: None,
                fields: Vec::new(),
            },
        };
        (status, Json(body)).into_response()
    }
}
