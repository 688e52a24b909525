//! HTTP transport for the deduplicating proxy and the emulated edge servers.

pub mod edge;
pub mod proxy;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};

use dedup_core::Error;

pub(crate) fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Input(_) => StatusCode::BAD_REQUEST,
        Error::UnknownServer(_) | Error::UnknownService(_) => StatusCode::NOT_FOUND,
        Error::DuplicateServer(_) => StatusCode::CONFLICT,
        Error::NoLiveServers | Error::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::Config(_) | Error::InvalidAdjustment(_) => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

pub(crate) fn error_response(e: &Error) -> Response {
    (status_of(e), e.to_string()).into_response()
}
