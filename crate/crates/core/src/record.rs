use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

/// Characters that separate fields, records and frames on the wire.
pub const RESERVED_CHARS: [char; 4] = ['|', ';', '\n', '\r'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatusError {
    #[error("status token is empty")]
    Empty,
    #[error("status token {0:?} contains a delimiter")]
    Delimiter(String),
    #[error("status token {0:?} has surrounding whitespace")]
    Whitespace(String),
}

/// Short status token attached to every record ("ok", "error", ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StatusCode(String);

impl StatusCode {
    pub fn new(token: impl Into<String>) -> Result<Self, StatusError> {
        let token = token.into();
        if token.is_empty() {
            return Err(StatusError::Empty);
        }
        if token.contains(RESERVED_CHARS) {
            return Err(StatusError::Delimiter(token));
        }
        if token.trim() != token {
            return Err(StatusError::Whitespace(token));
        }
        Ok(StatusCode(token))
    }

    pub fn ok() -> Self {
        StatusCode("ok".to_owned())
    }

    pub fn error() -> Self {
        StatusCode("error".to_owned())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_ok(&self) -> bool {
        self.0 == "ok"
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for StatusCode {
    type Error = StatusError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        StatusCode::new(value)
    }
}

impl From<StatusCode> for String {
    fn from(value: StatusCode) -> Self {
        value.0
    }
}

/// One time-stamped, status-tagged sample.
///
/// Float records are the common case; integer tables ("opmode", "dim") use
/// `Record<i64>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record<T = f64> {
    pub ts: Timestamp,
    pub status: StatusCode,
    pub value: T,
}

impl<T> Record<T> {
    pub fn new(ts: Timestamp, status: StatusCode, value: T) -> Self {
        Record { ts, status, value }
    }

    pub fn ok(ts: Timestamp, value: T) -> Self {
        Record { ts, status: StatusCode::ok(), value }
    }
}

impl Record<i64> {
    pub fn to_float(&self) -> Record<f64> {
        Record { ts: self.ts, status: self.status.clone(), value: self.value as f64 }
    }
}
