use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use fedchain_core::harness::StepError;
use serde_json::json;

/// An HTTP error with a stable code in the body: `{"error": code, "message": ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "SchemaError", message)
    }

    pub fn unauthenticated() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "Unauthenticated",
            "missing or unknown bearer token",
        )
    }

    pub fn forbidden(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.code, "message": self.message })),
        )
            .into_response()
    }
}

/// Maps a stable error code from the core to an HTTP status.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "SchemaError" | "MissingArg" | "BadArg" | "NegativeAmount" | "NonPositive" | "Overflow"
        | "BadTimeslot" | "InvalidConfig" | "BadForecast" | "BadPayload" => StatusCode::BAD_REQUEST,
        "NotAuthority" | "NotTokenAuthority" | "Unauthorized" | "NotDso" | "NotAMember"
        | "NotMember" | "UnknownActor" | "WrongPayloadKind" | "RoleForbidden"
        | "ReadRestricted" => StatusCode::FORBIDDEN,
        "LotNotFound" | "TxNotFound" | "NoDeployment" => StatusCode::NOT_FOUND,
        c if c.starts_with("Unknown") => StatusCode::NOT_FOUND,
        _ => StatusCode::CONFLICT,
    }
}

impl From<StepError> for ApiError {
    fn from(e: StepError) -> Self {
        Self::new(status_for(&e.code), &e.code, e.detail)
    }
}
