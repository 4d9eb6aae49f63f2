//! Newline-delimited JSON ingestion files.
//!
//! Each non-blank line is one of: a run record (has `revision`), a raw event
//! `{run_id, test, op_index, duration_ns, worker}`, or a pre-aggregated value
//! `{project, configuration, task, test, measurement, run_id, value}`.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MetricKey, RawEvent, RunId, TestRun};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreAggregatedRecord {
    pub project: String,
    pub configuration: String,
    pub task: String,
    pub test: String,
    pub measurement: String,
    pub run_id: RunId,
    pub value: f64,
}

impl PreAggregatedRecord {
    pub fn key(&self) -> Result<MetricKey> {
        MetricKey::new(&self.project, &self.configuration, &self.task, &self.test, &self.measurement)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Run(TestRun),
    Raw(RawEvent),
    PreAggregated(PreAggregatedRecord),
}

pub fn parse_record(line: &str) -> Result<Record> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Validation(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| Error::Validation("expected a JSON object".into()))?;
    let decode = |e: serde_json::Error| Error::Validation(e.to_string());
    if obj.contains_key("revision") {
        serde_json::from_value(value).map(Record::Run).map_err(decode)
    } else if obj.contains_key("op_index") {
        serde_json::from_value(value).map(Record::Raw).map_err(decode)
    } else if obj.contains_key("value") {
        serde_json::from_value(value).map(Record::PreAggregated).map_err(decode)
    } else {
        Err(Error::Validation("unrecognized record".into()))
    }
}

/// Parses every line; errors name the 1-based line number.
pub fn parse_ndjson(reader: impl BufRead) -> Result<Vec<(usize, Record)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line).map_err(|e| Error::Validation(format!("line {n}: {e}")))?;
        out.push((n, record));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub runs: usize,
    pub measurements: usize,
}

impl Store {
    /// Registers the runs, then stores events or values grouped by run.
    /// `raw` selects which measurement record shape the file must contain.
    pub fn ingest_records(&self, records: Vec<(usize, Record)>, raw: bool) -> Result<IngestSummary> {
        let mut summary = IngestSummary::default();
        let mut events: BTreeMap<RunId, Vec<RawEvent>> = BTreeMap::new();
        let mut values: BTreeMap<RunId, Vec<(MetricKey, f64)>> = BTreeMap::new();
        let mut runs = Vec::new();
        for (n, record) in records {
            let at = |e: Error| match e {
                Error::Validation(m) => Error::Validation(format!("line {n}: {m}")),
                other => other,
            };
            match record {
                Record::Run(run) => runs.push(run),
                Record::Raw(e) if raw => events.entry(e.run_id.clone()).or_default().push(e),
                Record::PreAggregated(p) if !raw => {
                    let key = p.key().map_err(at)?;
                    values.entry(p.run_id).or_default().push((key, p.value));
                }
                Record::Raw(_) => {
                    return Err(Error::Validation(format!("line {n}: raw event in a pre-aggregated file")))
                }
                Record::PreAggregated(_) => {
                    return Err(Error::Validation(format!("line {n}: pre-aggregated value in a raw file")))
                }
            }
        }
        for run in runs {
            self.register_run(run)?;
            summary.runs += 1;
        }
        for (run_id, evs) in events {
            summary.measurements += self.ingest_raw(&run_id, evs)?.len();
        }
        for (run_id, vals) in values {
            summary.measurements += self.ingest_preaggregated(&run_id, vals)?.len();
        }
        Ok(summary)
    }
}
