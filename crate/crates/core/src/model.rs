//! Domain types for stored results and the raw-event aggregation rules.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, StatsError};

pub const THROUGHPUT: &str = "Throughput";
pub const AVERAGE_LATENCY: &str = "AverageLatency";

/// Version of the raw-event aggregation rules. Stored with every derived value.
pub const AGGREGATION_VERSION: u32 = 1;

fn check_identifier(field: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Validation(format!("{field} must not be empty")));
    }
    if value.contains('/') {
        return Err(Error::Validation(format!("{field} must not contain '/': {value:?}")));
    }
    Ok(())
}

/// Identity of one time series.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub project: String,
    pub configuration: String,
    pub task: String,
    pub test: String,
    pub measurement: String,
}

impl MetricKey {
    pub fn new(
        project: impl Into<String>,
        configuration: impl Into<String>,
        task: impl Into<String>,
        test: impl Into<String>,
        measurement: impl Into<String>,
    ) -> Result<Self> {
        let key = MetricKey {
            project: project.into(),
            configuration: configuration.into(),
            task: task.into(),
            test: test.into(),
            measurement: measurement.into(),
        };
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        check_identifier("project", &self.project)?;
        check_identifier("configuration", &self.configuration)?;
        check_identifier("task", &self.task)?;
        check_identifier("test", &self.test)?;
        check_identifier("measurement", &self.measurement)
    }

    pub fn scope(&self) -> MetricScope {
        MetricScope {
            project: self.project.clone(),
            configuration: self.configuration.clone(),
            task: self.task.clone(),
        }
    }

    pub fn with_measurement(&self, measurement: impl Into<String>) -> MetricKey {
        MetricKey { measurement: measurement.into(), ..self.clone() }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}/{}", self.project, self.configuration, self.task, self.test, self.measurement)
    }
}

impl FromStr for MetricKey {
    type Err = Error;

    /// Parses `project/configuration/task/test/measurement`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [p, c, t, te, m] => MetricKey::new(*p, *c, *t, *te, *m),
            _ => Err(Error::Validation(format!("metric key must have 5 '/'-separated components, got {s:?}"))),
        }
    }
}

/// The (project, configuration, task) part of a key; one task run covers it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricScope {
    pub project: String,
    pub configuration: String,
    pub task: String,
}

impl MetricScope {
    pub fn validate(&self) -> Result<()> {
        check_identifier("project", &self.project)?;
        check_identifier("configuration", &self.configuration)?;
        check_identifier("task", &self.task)
    }

    pub fn key(&self, test: &str, measurement: &str) -> MetricKey {
        MetricKey {
            project: self.project.clone(),
            configuration: self.configuration.clone(),
            task: self.task.clone(),
            test: test.to_string(),
            measurement: measurement.to_string(),
        }
    }
}

impl fmt::Display for MetricScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.project, self.configuration, self.task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RunId {
    fn from(s: &str) -> Self {
        RunId(s.to_string())
    }
}

/// One execution of a task at a revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub run_id: RunId,
    #[serde(flatten)]
    pub scope: MetricScope,
    pub revision: String,
    /// Position of `revision` in commit history.
    pub order: i64,
    pub commit_date: DateTime<Utc>,
    pub executed_at: DateTime<Utc>,
    #[serde(default)]
    pub suppressed: bool,
    #[serde(default)]
    pub rerun_index: u32,
}

impl TestRun {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.0.is_empty() {
            return Err(Error::Validation("run_id must not be empty".into()));
        }
        if self.revision.is_empty() {
            return Err(Error::Validation("revision must not be empty".into()));
        }
        self.scope.validate()
    }
}

/// Latency of a single operation reported by a test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEvent {
    pub run_id: RunId,
    pub test: String,
    pub op_index: u64,
    pub duration_ns: i64,
    pub worker: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MeasurementSource {
    RawDerived,
    PreAggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementValue {
    pub key: MetricKey,
    pub run_id: RunId,
    pub value: f64,
    pub source: MeasurementSource,
    pub is_canary: bool,
    pub calculated_on: DateTime<Utc>,
    /// Aggregation rules version; present for raw-derived values only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub order: i64,
    pub revision: String,
    pub commit_date: DateTime<Utc>,
    pub value: f64,
    pub run_id: RunId,
    #[serde(default)]
    pub suppressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub key: MetricKey,
    pub points: Vec<SeriesPoint>,
}

impl Series {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn position_of_revision(&self, revision: &str) -> Option<usize> {
        self.points.iter().rposition(|p| p.revision == revision)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RootCause {
    Code,
    Test,
    Configuration,
    System,
    Noise,
    Duplicate,
    Unlabeled,
}

impl RootCause {
    pub const ALL: [RootCause; 7] = [
        RootCause::Code,
        RootCause::Test,
        RootCause::Configuration,
        RootCause::System,
        RootCause::Noise,
        RootCause::Duplicate,
        RootCause::Unlabeled,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Resolution {
    Open,
    Fixed,
    Improvement,
    RegressionAccepted,
    WontFix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub ticket_id: String,
    pub summary: String,
    pub root_cause: RootCause,
    pub resolution: Resolution,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub change_points: Vec<String>,
}

/// Rules for turning raw events into measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub version: u32,
    pub percentiles: Vec<f64>,
    /// Used as the throughput denominator; raw events carry no timestamps.
    pub nominal_run_duration_secs: f64,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec {
            version: AGGREGATION_VERSION,
            percentiles: vec![50.0, 95.0, 99.0],
            nominal_run_duration_secs: 60.0,
        }
    }
}

impl AggregationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_run_duration_secs.is_finite() && self.nominal_run_duration_secs > 0.0) {
            return Err(Error::Validation("nominal run duration must be positive".into()));
        }
        for &p in &self.percentiles {
            stats::check_percentile(p)?;
        }
        Ok(())
    }
}

/// `Latency{p}thPercentile`, with `p` in shortest decimal form
/// (`50` -> `Latency50thPercentile`, `99.99` -> `Latency99.99thPercentile`).
pub fn percentile_measurement(p: f64) -> String {
    format!("Latency{p}thPercentile")
}

/// Durations as sorted reals. Rejects an empty batch or a negative duration.
pub fn sorted_durations(events: &[RawEvent]) -> Result<Vec<f64>> {
    if events.is_empty() {
        return Err(Error::Validation("no events".into()));
    }
    if let Some(bad) = events.iter().find(|e| e.duration_ns < 0) {
        return Err(Error::Validation(format!(
            "negative duration {} for op {} of test {}",
            bad.duration_ns, bad.op_index, bad.test
        )));
    }
    let mut durations: Vec<f64> = events.iter().map(|e| e.duration_ns as f64).collect();
    durations.sort_by(f64::total_cmp);
    Ok(durations)
}

/// Latency percentile over the events of one (run, test).
pub fn latency_percentile(events: &[RawEvent], p: f64) -> Result<f64> {
    stats::check_percentile(p)?;
    Ok(stats::percentile_of_sorted(&sorted_durations(events)?, p))
}

/// Every measurement derived for one (run, test) under `spec`, in emission order.
pub fn aggregate(events: &[RawEvent], spec: &AggregationSpec) -> Result<Vec<(String, f64)>> {
    spec.validate()?;
    let durations = sorted_durations(events)?;
    let summary = stats::describe(&durations).map_err(|e: StatsError| Error::Stats(e))?;
    let mut out = Vec::with_capacity(2 + spec.percentiles.len());
    out.push((THROUGHPUT.to_string(), events.len() as f64 / spec.nominal_run_duration_secs));
    out.push((AVERAGE_LATENCY.to_string(), summary.mean));
    for &p in &spec.percentiles {
        out.push((percentile_measurement(p), stats::percentile_of_sorted(&durations, p)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(durations: impl IntoIterator<Item = i64>) -> Vec<RawEvent> {
        durations
            .into_iter()
            .enumerate()
            .map(|(i, d)| RawEvent {
                run_id: "r1".into(),
                test: "insert".into(),
                op_index: i as u64,
                duration_ns: d,
                worker: 0,
            })
            .collect()
    }

    #[test]
    fn key_round_trips_through_display() {
        let key = MetricKey::new("sys-perf", "linux-1-node", "ycsb", "ycsb_load", "Throughput").unwrap();
        assert_eq!(key.to_string().parse::<MetricKey>().unwrap(), key);
        assert!("a/b/c/d".parse::<MetricKey>().is_err());
        assert!(MetricKey::new("", "b", "c", "d", "e").is_err());
    }

    #[test]
    fn measurement_names() {
        assert_eq!(percentile_measurement(50.0), "Latency50thPercentile");
        assert_eq!(percentile_measurement(99.99), "Latency99.99thPercentile");
        assert_eq!(percentile_measurement(99.9), "Latency99.9thPercentile");
    }

    #[test]
    fn aggregate_emits_default_percentile_set() {
        let out = aggregate(&events(1..=10_000), &AggregationSpec::default()).unwrap();
        let names: Vec<&str> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            ["Throughput", "AverageLatency", "Latency50thPercentile", "Latency95thPercentile", "Latency99thPercentile"]
        );
        assert_eq!(out[2].1, 5000.5);
        assert_eq!(out[1].1, 5000.5);
        assert_eq!(out[0].1, 10_000.0 / 60.0);
    }

    #[test]
    fn negative_duration_rejected() {
        assert!(matches!(aggregate(&events([5, -1, 3]), &AggregationSpec::default()), Err(Error::Validation(_))));
    }
}
