//! Storage and analysis for CI performance results: result store with raw
//! recomputation, E-Divisive change point detection, GESD canary checks,
//! revision comparison and triage.

pub mod canary;
pub mod changepoint;
pub mod compare;
pub mod error;
pub mod ingest;
pub mod model;
pub mod outlier;
pub mod stats;
pub mod store;
pub mod triage;

pub use error::{Error, ErrorKind, Result};
pub use model::{MetricKey, MetricScope, RunId, Series, TestRun};
pub use store::{KeyFilter, Store};
