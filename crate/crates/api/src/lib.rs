//! HTTP service and command line over the perfbaron store.

pub mod cli;
pub mod http;

use chrono::{DateTime, NaiveDate, Utc};
use perfbaron_core::{Error, Result};

/// Parses an RFC 3339 timestamp or a `YYYY-MM-DD` date (midnight UTC).
pub fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
        .map_err(|_| Error::Validation(format!("invalid timestamp {s:?}")))
}
