//! The error envelope shared by the CLI and the HTTP service.

use coconstruct_core::session::SessionError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

impl ErrorEnvelope {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new("unknown-id", format!("no session {id}")).with_detail(serde_json::json!({ "session_id": id }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

impl std::fmt::Display for ErrorEnvelope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ErrorEnvelope {}

impl From<&SessionError> for ErrorEnvelope {
    fn from(err: &SessionError) -> Self {
        let detail = match err {
            SessionError::WrongStatus { action, status } => serde_json::json!({ "action": action, "status": status }),
            SessionError::UnknownId(id) | SessionError::NotFinalist(id) => serde_json::json!({ "id": id }),
            SessionError::IterationLimit(limit) => serde_json::json!({ "max_iterations": limit }),
            SessionError::InvalidFile(report) => serde_json::to_value(report).unwrap_or(Value::Null),
            SessionError::EventGap { expected, found } => serde_json::json!({ "expected": expected, "found": found }),
            _ => Value::Null,
        };
        Self::new(err.code(), err.to_string()).with_detail(detail)
    }
}

impl From<SessionError> for ErrorEnvelope {
    fn from(err: SessionError) -> Self {
        Self::from(&err)
    }
}
