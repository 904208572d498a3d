use serde_json::Value;
use thiserror::Error;

use crate::identity::ClientIdentity;

/// Errors a service instance reports back to its caller.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("bad payload: {0}")]
    BadPayload(String),
    #[error("no location fix available")]
    NoFixAvailable,
    #[error("no sensor frame available")]
    NoFrameAvailable,
    #[error("no such field `{0}`")]
    NoSuchField(String),
    #[error("no window has focus")]
    NoFocus,
    #[error("activity `{got}` does not hold focus (current: `{current}`)")]
    StaleFocus { current: String, got: String },
    #[error("input method `{0}` is not available")]
    ImeNotAvailable(String),
    #[error("service unavailable")]
    Unavailable,
}

impl ServiceError {
    /// Wire status code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownMethod(_) => "unknown_method",
            ServiceError::BadPayload(_) => "bad_payload",
            ServiceError::NoFixAvailable => "no_fix_available",
            ServiceError::NoFrameAvailable => "no_frame_available",
            ServiceError::NoSuchField(_) => "no_such_field",
            ServiceError::NoFocus => "no_focus",
            ServiceError::StaleFocus { .. } => "stale_focus",
            ServiceError::ImeNotAvailable(_) => "ime_not_available",
            ServiceError::Unavailable => "service_unavailable",
        }
    }
}

/// A dispatch target behind a registered service record.
pub trait ServiceEndpoint: Send + Sync {
    fn call(&self, sender: &ClientIdentity, method: &str, payload: &Value) -> Result<Value, ServiceError>;
}

/// Reflects the caller and payload back. Used for app-published nodes.
#[derive(Debug, Default)]
pub struct EchoEndpoint;

impl ServiceEndpoint for EchoEndpoint {
    fn call(&self, sender: &ClientIdentity, method: &str, payload: &Value) -> Result<Value, ServiceError> {
        Ok(serde_json::json!({
            "sender_uid": sender.uid,
            "method": method,
            "payload": payload,
        }))
    }
}

pub(crate) fn decode<T: serde::de::DeserializeOwned>(payload: &Value) -> Result<T, ServiceError> {
    serde_json::from_value(payload.clone()).map_err(|e| ServiceError::BadPayload(e.to_string()))
}

pub(crate) fn encode<T: serde::Serialize>(value: &T) -> Result<Value, ServiceError> {
    serde_json::to_value(value).map_err(|e| ServiceError::BadPayload(e.to_string()))
}
