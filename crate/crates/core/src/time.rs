//! Microsecond UTC timestamps with a fixed-width text form.
//!
//! Every record in the store and on the wire carries a [`Timestamp`]. The
//! canonical text form is always 26 characters, `YYYY-MM-DD HH:MM:SS.ffffff`,
//! which is what journals, CSV exports and protocol frames use.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Length of the canonical text form.
pub const TIMESTAMP_LEN: usize = 26;

const FORMAT: &str = "%Y-%m-%d %H:%M:%S%.6f";

// 0001-01-01 and 9999-12-31 bound the four-digit-year range.
const MIN_MICROS: i64 = -62_135_596_800_000_000;
const MAX_MICROS: i64 = 253_402_300_799_999_999;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimestampError {
    #[error("timestamp text must be {TIMESTAMP_LEN} characters, got {0}")]
    Length(usize),
    #[error("malformed timestamp {0:?}")]
    Malformed(String),
    #[error("timestamp out of range: {0} µs")]
    OutOfRange(i64),
}

/// A UTC instant with microsecond resolution, stored as Unix microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_unix_micros(micros: i64) -> Result<Self, TimestampError> {
        if !(MIN_MICROS..=MAX_MICROS).contains(&micros) {
            return Err(TimestampError::OutOfRange(micros));
        }
        Ok(Timestamp(micros))
    }

    pub fn unix_micros(self) -> i64 {
        self.0
    }

    /// Fractional Unix seconds, used for CSV export and plotting.
    pub fn unix_seconds(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Offset by a (non-negative or negative) number of microseconds.
    pub fn add_micros(self, micros: i64) -> Result<Self, TimestampError> {
        Self::from_unix_micros(self.0.saturating_add(micros))
    }

    pub fn parse(text: &str) -> Result<Self, TimestampError> {
        if text.len() != TIMESTAMP_LEN {
            return Err(TimestampError::Length(text.len()));
        }
        let naive = NaiveDateTime::parse_from_str(text, FORMAT)
            .map_err(|_| TimestampError::Malformed(text.to_owned()))?;
        let ts = Timestamp::from_unix_micros(naive.and_utc().timestamp_micros())?;
        // chrono accepts some non-canonical spellings (e.g. a leap second);
        // only the exact canonical form is admitted.
        if ts.to_string() != text {
            return Err(TimestampError::Malformed(text.to_owned()));
        }
        Ok(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // In range by construction.
        let dt = DateTime::from_timestamp_micros(self.0).expect("timestamp in range");
        write!(f, "{}", dt.naive_utc().format(FORMAT))
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

static LAST_NOW: AtomicI64 = AtomicI64::new(i64::MIN);

/// Current wall-clock instant, never earlier than a previous call in this
/// process (a backwards system clock step is flattened).
pub fn now_utc() -> Timestamp {
    let now = Utc::now().timestamp_micros();
    let prev = LAST_NOW.fetch_max(now, Ordering::AcqRel);
    Timestamp(now.max(prev))
}
