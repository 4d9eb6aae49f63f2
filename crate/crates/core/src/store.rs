//! Embedded result store.
//!
//! State lives in memory behind a single reader-writer lock. Every mutation
//! is validated against the current state, appended to a newline-delimited
//! JSON journal, and only then applied; opening a store replays the journal.
//! Readers always see a consistent snapshot and writes are serialized.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::canary::{CanaryDecision, Mute, PolicyConfig, RescheduleRecord, StoredOutlierReport};
use crate::changepoint::{self, ChangePoint, CpdParams};
use crate::error::{compile_regex, Error, Result};
use crate::model::{
    self, AggregationSpec, MeasurementSource, MeasurementValue, MetricKey, RawEvent, RunId, Series, SeriesPoint,
    TestRun, Ticket,
};
use crate::triage::{TicketEvent, TriageAction};

/// Detection reruns only over this many newest points; older change points
/// are kept as persisted.
pub const DETECTION_TAIL_WINDOW: usize = 500;

pub const DEFAULT_CANARY_PATTERN: &str = "^canary";

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(at))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock() = at;
    }

    pub fn advance(&self, by: chrono::Duration) {
        let mut t = self.0.lock();
        *t += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

/// Selects metric keys. Empty fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyFilter {
    pub keys: Vec<MetricKey>,
    pub project: Option<String>,
    pub configuration: Option<String>,
    pub task: Option<String>,
    pub test: Option<String>,
    pub measurement_regex: Option<String>,
}

impl KeyFilter {
    pub fn all() -> Self {
        KeyFilter::default()
    }

    pub fn key(key: MetricKey) -> Self {
        KeyFilter { keys: vec![key], ..KeyFilter::default() }
    }

    pub fn compile(&self) -> Result<CompiledKeyFilter<'_>> {
        let measurement = self.measurement_regex.as_deref().map(compile_regex).transpose()?;
        Ok(CompiledKeyFilter { filter: self, measurement })
    }
}

pub struct CompiledKeyFilter<'a> {
    filter: &'a KeyFilter,
    measurement: Option<Regex>,
}

impl CompiledKeyFilter<'_> {
    pub fn matches(&self, key: &MetricKey) -> bool {
        let f = self.filter;
        let eq = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w == have);
        (f.keys.is_empty() || f.keys.contains(key))
            && eq(&f.project, &key.project)
            && eq(&f.configuration, &key.configuration)
            && eq(&f.task, &key.task)
            && eq(&f.test, &key.test)
            && self.measurement.as_ref().is_none_or(|re| re.is_match(&key.measurement))
    }
}

/// Raw events of one (run, test) and the rules used to aggregate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBatch {
    pub events: Vec<RawEvent>,
    pub spec: AggregationSpec,
    /// Percentiles added after ingestion.
    pub extra_percentiles: Vec<f64>,
}

impl RawBatch {
    /// Every raw-derived measurement this batch defines, in emission order.
    pub fn derive(&self) -> Result<Vec<(String, f64)>> {
        let mut out = model::aggregate(&self.events, &self.spec)?;
        for &p in &self.extra_percentiles {
            out.push((model::percentile_measurement(p), model::latency_percentile(&self.events, p)?));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum JournalEntry {
    RegisterRun {
        run: TestRun,
    },
    IngestRaw {
        run_id: RunId,
        batches: Vec<(String, RawBatch)>,
        values: Vec<MeasurementValue>,
    },
    SetRunSuppressed {
        run_id: RunId,
        suppressed: bool,
    },
    PutMeasurements {
        values: Vec<MeasurementValue>,
    },
    AddPercentile {
        batches: Vec<(RunId, String)>,
        percentile: f64,
        values: Vec<MeasurementValue>,
    },
    DropMeasurements {
        entries: Vec<(MetricKey, RunId)>,
    },
    SetChangePoints {
        key: MetricKey,
        change_points: Vec<ChangePoint>,
    },
    Triage {
        change_points: Vec<ChangePoint>,
        action: TriageAction,
        ticket: Option<Ticket>,
    },
    UpdateTicket {
        ticket: Ticket,
        event: TicketEvent,
    },
    CanaryEvaluated {
        decision: CanaryDecision,
        reports: Vec<StoredOutlierReport>,
        reschedule: Option<RescheduleRecord>,
        suppress_run: Option<RunId>,
    },
    PutMute {
        mute: Mute,
    },
    ExpireMute {
        id: u64,
        at: DateTime<Utc>,
    },
    SetCanaryPatterns {
        patterns: Vec<String>,
    },
    SetPolicy {
        config: PolicyConfig,
    },
    SetAggregation {
        spec: AggregationSpec,
    },
}

#[derive(Debug, Clone)]
pub struct State {
    pub(crate) runs: BTreeMap<RunId, TestRun>,
    pub(crate) raw: BTreeMap<(RunId, String), RawBatch>,
    pub(crate) measurements: BTreeMap<MetricKey, BTreeMap<RunId, MeasurementValue>>,
    pub(crate) change_points: BTreeMap<MetricKey, Vec<ChangePoint>>,
    pub(crate) tickets: BTreeMap<String, Ticket>,
    pub(crate) next_ticket: u64,
    pub(crate) triage_log: Vec<TriageAction>,
    pub(crate) ticket_log: Vec<TicketEvent>,
    pub(crate) mutes: BTreeMap<u64, Mute>,
    pub(crate) next_mute: u64,
    pub(crate) decisions: Vec<CanaryDecision>,
    pub(crate) outlier_reports: Vec<StoredOutlierReport>,
    pub(crate) reschedules: Vec<RescheduleRecord>,
    pub(crate) canary_patterns: Vec<String>,
    canary_regexes: Vec<Regex>,
    pub(crate) policy: PolicyConfig,
    pub(crate) aggregation: AggregationSpec,
}

impl Default for State {
    fn default() -> Self {
        State {
            runs: BTreeMap::new(),
            raw: BTreeMap::new(),
            measurements: BTreeMap::new(),
            change_points: BTreeMap::new(),
            tickets: BTreeMap::new(),
            next_ticket: 1,
            triage_log: Vec::new(),
            ticket_log: Vec::new(),
            mutes: BTreeMap::new(),
            next_mute: 1,
            decisions: Vec::new(),
            outlier_reports: Vec::new(),
            reschedules: Vec::new(),
            canary_patterns: vec![DEFAULT_CANARY_PATTERN.to_string()],
            canary_regexes: vec![Regex::new(DEFAULT_CANARY_PATTERN).expect("valid default")],
            policy: PolicyConfig::default(),
            aggregation: AggregationSpec::default(),
        }
    }
}

impl State {
    fn apply(&mut self, entry: JournalEntry) {
        match entry {
            JournalEntry::RegisterRun { run } => {
                self.runs.insert(run.run_id.clone(), run);
            }
            JournalEntry::IngestRaw { run_id, batches, values } => {
                for (test, batch) in batches {
                    self.raw.insert((run_id.clone(), test), batch);
                }
                self.put_values(values);
            }
            JournalEntry::SetRunSuppressed { run_id, suppressed } => {
                if let Some(run) = self.runs.get_mut(&run_id) {
                    run.suppressed = suppressed;
                }
            }
            JournalEntry::PutMeasurements { values } => self.put_values(values),
            JournalEntry::AddPercentile { batches, percentile, values } => {
                for id in batches {
                    if let Some(batch) = self.raw.get_mut(&id) {
                        if !batch.extra_percentiles.contains(&percentile)
                            && !batch.spec.percentiles.contains(&percentile)
                        {
                            batch.extra_percentiles.push(percentile);
                        }
                    }
                }
                self.put_values(values);
            }
            JournalEntry::DropMeasurements { entries } => {
                for (key, run_id) in entries {
                    if let Some(by_run) = self.measurements.get_mut(&key) {
                        by_run.remove(&run_id);
                        if by_run.is_empty() {
                            self.measurements.remove(&key);
                        }
                    }
                }
            }
            JournalEntry::SetChangePoints { key, change_points } => {
                if change_points.is_empty() {
                    self.change_points.remove(&key);
                } else {
                    self.change_points.insert(key, change_points);
                }
            }
            JournalEntry::Triage { change_points, action, ticket } => {
                for cp in change_points {
                    if let Some(slot) =
                        self.change_points.get_mut(&cp.key).and_then(|list| list.iter_mut().find(|c| c.id == cp.id))
                    {
                        *slot = cp;
                    }
                }
                if let Some(ticket) = ticket {
                    if !self.tickets.contains_key(&ticket.ticket_id) {
                        self.next_ticket += 1;
                    }
                    self.tickets.insert(ticket.ticket_id.clone(), ticket);
                }
                self.triage_log.push(action);
            }
            JournalEntry::UpdateTicket { ticket, event } => {
                self.tickets.insert(ticket.ticket_id.clone(), ticket);
                self.ticket_log.push(event);
            }
            JournalEntry::CanaryEvaluated { decision, reports, reschedule, suppress_run } => {
                if let Some(run) = suppress_run.and_then(|id| self.runs.get_mut(&id)) {
                    run.suppressed = true;
                }
                self.decisions.push(decision);
                self.outlier_reports.extend(reports);
                self.reschedules.extend(reschedule);
            }
            JournalEntry::PutMute { mute } => {
                self.next_mute = self.next_mute.max(mute.id + 1);
                self.mutes.insert(mute.id, mute);
            }
            JournalEntry::ExpireMute { id, at } => {
                if let Some(m) = self.mutes.get_mut(&id) {
                    m.expired_at = Some(at);
                }
            }
            JournalEntry::SetCanaryPatterns { patterns } => {
                self.canary_regexes = patterns.iter().filter_map(|p| Regex::new(p).ok()).collect();
                self.canary_patterns = patterns;
            }
            JournalEntry::SetPolicy { config } => self.policy = config,
            JournalEntry::SetAggregation { spec } => self.aggregation = spec,
        }
    }

    fn put_values(&mut self, values: Vec<MeasurementValue>) {
        for v in values {
            self.measurements.entry(v.key.clone()).or_default().insert(v.run_id.clone(), v);
        }
    }

    pub fn is_canary_test(&self, test: &str) -> bool {
        self.canary_regexes.iter().any(|re| re.is_match(test))
    }

    pub fn run(&self, run_id: &RunId) -> Result<&TestRun> {
        self.runs.get(run_id).ok_or_else(|| Error::NotFound(format!("run {run_id}")))
    }

    pub fn runs(&self) -> impl Iterator<Item = &TestRun> {
        self.runs.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &MetricKey> {
        self.measurements.keys()
    }

    pub fn matching_keys(&self, filter: &KeyFilter) -> Result<Vec<MetricKey>> {
        let compiled = filter.compile()?;
        Ok(self.measurements.keys().filter(|k| compiled.matches(k)).cloned().collect())
    }

    pub fn measurement(&self, key: &MetricKey, run_id: &RunId) -> Option<&MeasurementValue> {
        self.measurements.get(key).and_then(|m| m.get(run_id))
    }

    pub fn measurements_of(&self, key: &MetricKey) -> impl Iterator<Item = &MeasurementValue> {
        self.measurements.get(key).into_iter().flat_map(|m| m.values())
    }

    pub fn raw_batch(&self, run_id: &RunId, test: &str) -> Option<&RawBatch> {
        self.raw.get(&(run_id.clone(), test.to_string()))
    }

    pub fn change_points(&self, key: &MetricKey) -> &[ChangePoint] {
        self.change_points.get(key).map_or(&[], Vec::as_slice)
    }

    pub fn all_change_points(&self) -> impl Iterator<Item = &ChangePoint> {
        self.change_points.values().flatten()
    }

    pub fn tickets(&self) -> impl Iterator<Item = &Ticket> {
        self.tickets.values()
    }

    pub fn ticket(&self, id: &str) -> Option<&Ticket> {
        self.tickets.get(id)
    }

    pub fn triage_log(&self) -> &[TriageAction] {
        &self.triage_log
    }

    pub fn ticket_log(&self) -> &[TicketEvent] {
        &self.ticket_log
    }

    pub fn mutes(&self) -> impl Iterator<Item = &Mute> {
        self.mutes.values()
    }

    pub fn decisions(&self) -> &[CanaryDecision] {
        &self.decisions
    }

    pub fn outlier_reports(&self) -> &[StoredOutlierReport] {
        &self.outlier_reports
    }

    pub fn reschedules(&self) -> &[RescheduleRecord] {
        &self.reschedules
    }

    pub fn canary_patterns(&self) -> &[String] {
        &self.canary_patterns
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn aggregation(&self) -> &AggregationSpec {
        &self.aggregation
    }

    /// Measurement names recorded for one test within a scope.
    pub fn measurements_for_test(&self, scope_key: &MetricKey) -> Vec<String> {
        self.measurements
            .keys()
            .filter(|k| {
                k.project == scope_key.project
                    && k.configuration == scope_key.configuration
                    && k.task == scope_key.task
                    && k.test == scope_key.test
            })
            .map(|k| k.measurement.clone())
            .collect()
    }

    /// Series for `key`, sorted by commit order. Without `include_suppressed`
    /// suppressed runs are dropped and each revision keeps only its latest
    /// execution.
    pub fn series(&self, key: &MetricKey, include_suppressed: bool) -> Result<Series> {
        let by_run = self.measurements.get(key).ok_or_else(|| Error::NotFound(format!("series {key}")))?;
        let mut rows: Vec<(&TestRun, f64)> = Vec::with_capacity(by_run.len());
        for (run_id, m) in by_run {
            let run = self.run(run_id)?;
            if include_suppressed || !run.suppressed {
                rows.push((run, m.value));
            }
        }
        rows.sort_by(|(a, _), (b, _)| {
            (a.order, a.executed_at, a.rerun_index, &a.run_id).cmp(&(b.order, b.executed_at, b.rerun_index, &b.run_id))
        });
        if !include_suppressed {
            let mut latest: Vec<(&TestRun, f64)> = Vec::with_capacity(rows.len());
            for row in rows {
                match latest.last_mut() {
                    Some(last) if last.0.revision == row.0.revision => *last = row,
                    _ => latest.push(row),
                }
            }
            rows = latest;
        }
        Ok(Series {
            key: key.clone(),
            points: rows
                .into_iter()
                .map(|(run, value)| SeriesPoint {
                    order: run.order,
                    revision: run.revision.clone(),
                    commit_date: run.commit_date,
                    value,
                    run_id: run.run_id.clone(),
                    suppressed: run.suppressed,
                })
                .collect(),
        })
    }
}

/// Outcome of adding a percentile to stored raw data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecomputeOutcome {
    pub created: usize,
    pub unchanged: usize,
    /// Keys whose runs only have pre-aggregated data.
    pub not_recomputable: Vec<String>,
}

/// Summary of one detection pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub keys: usize,
    pub change_points: usize,
    pub per_key: BTreeMap<String, usize>,
}

pub struct Store {
    state: RwLock<State>,
    journal: Option<Mutex<File>>,
    path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish_non_exhaustive()
    }
}

impl Store {
    /// A store that is not persisted anywhere.
    pub fn in_memory() -> Self {
        Store { state: RwLock::new(State::default()), journal: None, path: None, clock: Arc::new(SystemClock) }
    }

    /// Opens (creating if needed) a journal-backed store at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry =
                    serde_json::from_str(&line).map_err(|e| Error::Journal { line: i + 1, message: e.to_string() })?;
                state.apply(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Store {
            state: RwLock::new(state),
            journal: Some(Mutex::new(file)),
            path: Some(path),
            clock: Arc::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Consistent read-only view of the whole store.
    pub fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read()
    }

    /// Validates against the current state, journals, then applies.
    pub(crate) fn mutate<T>(
        &self,
        f: impl FnOnce(&State, DateTime<Utc>) -> Result<(Option<JournalEntry>, T)>,
    ) -> Result<T> {
        let mut state = self.state.write();
        let now = self.clock.now();
        let (entry, out) = f(&state, now)?;
        if let Some(entry) = entry {
            if let Some(journal) = &self.journal {
                let mut line =
                    serde_json::to_string(&entry).map_err(|e| Error::Internal(format!("journal encode: {e}")))?;
                line.push('\n');
                let mut file = journal.lock();
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
            state.apply(entry);
        }
        Ok(out)
    }

    pub fn register_run(&self, run: TestRun) -> Result<TestRun> {
        run.validate()?;
        self.mutate(|state, _| {
            if let Some(existing) = state.runs.get(&run.run_id) {
                if *existing == run {
                    return Ok((None, run));
                }
                return Err(Error::Conflict(format!("run {} already registered", run.run_id)));
            }
            if run.rerun_index > state.policy.max_reruns {
                return Err(Error::Validation(format!(
                    "rerun_index {} exceeds max_reruns {}",
                    run.rerun_index, state.policy.max_reruns
                )));
            }
            Ok((Some(JournalEntry::RegisterRun { run: run.clone() }), run))
        })
    }

    /// Stores raw per-operation events for a registered run and derives the
    /// configured measurements for each test in the batch.
    pub fn ingest_raw(&self, run_id: &RunId, events: Vec<RawEvent>) -> Result<Vec<MeasurementValue>> {
        if events.is_empty() {
            return Err(Error::Validation("no events".into()));
        }
        if let Some(bad) = events.iter().find(|e| e.duration_ns < 0) {
            return Err(Error::Validation(format!(
                "negative duration {} (test {}, op {})",
                bad.duration_ns, bad.test, bad.op_index
            )));
        }
        if let Some(other) = events.iter().find(|e| &e.run_id != run_id) {
            return Err(Error::Validation(format!("event for run {} in batch for run {run_id}", other.run_id)));
        }
        let mut by_test: BTreeMap<String, Vec<RawEvent>> = BTreeMap::new();
        for e in events {
            by_test.entry(e.test.clone()).or_default().push(e);
        }
        for (test, evs) in &by_test {
            let mut seen = BTreeSet::new();
            for e in evs {
                if !seen.insert((e.worker, e.op_index)) {
                    return Err(Error::Validation(format!(
                        "duplicate op_index {} for worker {} in test {test}",
                        e.op_index, e.worker
                    )));
                }
            }
        }

        self.mutate(|state, now| {
            let run = state.run(run_id)?;
            let is_done = |test: &String| state.raw.contains_key(&(run_id.clone(), test.clone()));
            let mut batches = Vec::with_capacity(by_test.len());
            let mut values = Vec::new();
            for (test, evs) in by_test {
                run.scope.key(&test, model::THROUGHPUT).validate()?;
                if is_done(&test) {
                    return Err(Error::Conflict(format!("raw events for {run_id}/{test} already stored")));
                }
                let batch = RawBatch { events: evs, spec: state.aggregation.clone(), extra_percentiles: Vec::new() };
                let is_canary = state.is_canary_test(&test);
                for (name, value) in batch.derive()? {
                    let key = run.scope.key(&test, &name);
                    if state.measurement(&key, run_id).is_some() {
                        return Err(Error::Conflict(format!("{key} already has a value for run {run_id}")));
                    }
                    values.push(MeasurementValue {
                        key,
                        run_id: run_id.clone(),
                        value,
                        source: MeasurementSource::RawDerived,
                        is_canary,
                        calculated_on: now,
                        aggregation_version: Some(batch.spec.version),
                    });
                }
                batches.push((test, batch));
            }
            let entry = JournalEntry::IngestRaw { run_id: run_id.clone(), batches, values: values.clone() };
            Ok((Some(entry), values))
        })
    }

    /// Stores statistics computed by the test itself.
    pub fn ingest_preaggregated(&self, run_id: &RunId, values: Vec<(MetricKey, f64)>) -> Result<Vec<MeasurementValue>> {
        if values.is_empty() {
            return Ok(Vec::new());
        }
        self.mutate(|state, now| {
            let run = state.run(run_id)?;
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(values.len());
            for (key, value) in values {
                key.validate()?;
                if key.scope() != run.scope {
                    return Err(Error::Validation(format!(
                        "key {key} does not belong to run {run_id} ({})",
                        run.scope
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::Validation(format!("non-finite value for {key}")));
                }
                if !seen.insert(key.clone()) || state.measurement(&key, run_id).is_some() {
                    return Err(Error::Conflict(format!("{key} already has a value for run {run_id}")));
                }
                out.push(MeasurementValue {
                    is_canary: state.is_canary_test(&key.test),
                    key,
                    run_id: run_id.clone(),
                    value,
                    source: MeasurementSource::PreAggregated,
                    calculated_on: now,
                    aggregation_version: None,
                });
            }
            Ok((Some(JournalEntry::PutMeasurements { values: out.clone() }), out))
        })
    }

    /// Adds a latency percentile over every stored raw batch matched by the
    /// filter's scope fields (`measurement_regex` is ignored: the new
    /// measurement name is fixed by `percentile`).
    pub fn recompute_statistics(&self, filter: &KeyFilter, percentile: f64) -> Result<RecomputeOutcome> {
        crate::stats::check_percentile(percentile)?;
        let scope_filter = KeyFilter { measurement_regex: None, keys: Vec::new(), ..filter.clone() };
        let compiled = scope_filter.compile()?;
        let name = model::percentile_measurement(percentile);
        self.mutate(|state, now| {
            let mut outcome = RecomputeOutcome::default();
            let mut batches = Vec::new();
            let mut values = Vec::new();
            let mut raw_tests = BTreeSet::new();
            for ((run_id, test), batch) in &state.raw {
                let run = state.run(run_id)?;
                let key = run.scope.key(test, &name);
                let exact_ok =
                    filter.keys.is_empty() || filter.keys.iter().any(|k| k.scope() == run.scope && k.test == *test);
                if !compiled.matches(&key) || !exact_ok {
                    continue;
                }
                raw_tests.insert((run.scope.clone(), test.clone()));
                let value = model::latency_percentile(&batch.events, percentile)?;
                match state.measurement(&key, run_id) {
                    Some(existing) if existing.value.to_bits() == value.to_bits() => {
                        outcome.unchanged += 1;
                    }
                    Some(existing) => {
                        return Err(Error::Conflict(format!(
                            "{key} for run {run_id} already holds {} (recomputed {value})",
                            existing.value
                        )));
                    }
                    None => {
                        outcome.created += 1;
                        batches.push((run_id.clone(), test.clone()));
                        values.push(MeasurementValue {
                            key,
                            run_id: run_id.clone(),
                            value,
                            source: MeasurementSource::RawDerived,
                            is_canary: state.is_canary_test(test),
                            calculated_on: now,
                            aggregation_version: Some(batch.spec.version),
                        });
                    }
                }
            }
            // Tests that matched but only carry pre-aggregated data.
            let mut missing = BTreeSet::new();
            for key in state.measurements.keys() {
                let probe = key.with_measurement(name.clone());
                if !compiled.matches(&probe) {
                    continue;
                }
                if !filter.keys.is_empty()
                    && !filter.keys.iter().any(|k| k.scope() == key.scope() && k.test == key.test)
                {
                    continue;
                }
                if !raw_tests.contains(&(key.scope(), key.test.clone())) {
                    missing.insert(format!("{}/{}", key.scope(), key.test));
                }
            }
            outcome.not_recomputable = missing.into_iter().collect();
            if outcome.created == 0 && outcome.unchanged == 0 && !outcome.not_recomputable.is_empty() {
                return Err(Error::CannotRecompute(outcome.not_recomputable));
            }
            let entry = (!values.is_empty()).then_some(JournalEntry::AddPercentile { batches, percentile, values });
            Ok((entry, outcome))
        })
    }

    /// Removes raw-derived values matched by `filter`; raw events stay.
    pub fn drop_derived(&self, filter: &KeyFilter) -> Result<usize> {
        let compiled = filter.compile()?;
        self.mutate(|state, _| {
            let entries: Vec<(MetricKey, RunId)> = state
                .measurements
                .iter()
                .filter(|(k, _)| compiled.matches(k))
                .flat_map(|(k, by_run)| {
                    by_run
                        .values()
                        .filter(|m| m.source == MeasurementSource::RawDerived)
                        .map(move |m| (k.clone(), m.run_id.clone()))
                })
                .collect();
            let n = entries.len();
            let entry = (n > 0).then_some(JournalEntry::DropMeasurements { entries });
            Ok((entry, n))
        })
    }

    /// Re-derives every missing raw-derived value from stored events using the
    /// aggregation rules recorded with them. Returns the values written.
    pub fn reaggregate(&self, filter: &KeyFilter) -> Result<Vec<MeasurementValue>> {
        let compiled = filter.compile()?;
        self.mutate(|state, now| {
            let mut values = Vec::new();
            for ((run_id, test), batch) in &state.raw {
                let run = state.run(run_id)?;
                for (name, value) in batch.derive()? {
                    let key = run.scope.key(test, &name);
                    if compiled.matches(&key) && state.measurement(&key, run_id).is_none() {
                        values.push(MeasurementValue {
                            key,
                            run_id: run_id.clone(),
                            value,
                            source: MeasurementSource::RawDerived,
                            is_canary: state.is_canary_test(test),
                            calculated_on: now,
                            aggregation_version: Some(batch.spec.version),
                        });
                    }
                }
            }
            let entry = (!values.is_empty()).then(|| JournalEntry::PutMeasurements { values: values.clone() });
            Ok((entry, values))
        })
    }

    /// Marks a run suspect (or clears the mark). Data is never deleted.
    pub fn set_run_suppressed(&self, run_id: &RunId, suppressed: bool) -> Result<()> {
        self.mutate(|state, _| {
            state.run(run_id)?;
            let entry = JournalEntry::SetRunSuppressed { run_id: run_id.clone(), suppressed };
            Ok((Some(entry), ()))
        })
    }

    pub fn get_series(&self, key: &MetricKey, include_suppressed: bool) -> Result<Series> {
        self.read().series(key, include_suppressed)
    }

    pub fn set_canary_patterns(&self, patterns: Vec<String>) -> Result<()> {
        for p in &patterns {
            compile_regex(p)?;
        }
        self.mutate(|_, _| Ok((Some(JournalEntry::SetCanaryPatterns { patterns }), ())))
    }

    pub fn set_policy(&self, config: PolicyConfig) -> Result<()> {
        config.gesd.validate()?;
        self.mutate(|_, _| Ok((Some(JournalEntry::SetPolicy { config }), ())))
    }

    pub fn set_aggregation(&self, spec: AggregationSpec) -> Result<()> {
        spec.validate()?;
        self.mutate(|_, _| Ok((Some(JournalEntry::SetAggregation { spec }), ())))
    }

    /// Runs change point detection for every key matched by `filter` and
    /// persists the results. Series longer than [`DETECTION_TAIL_WINDOW`] are
    /// only re-examined over their newest points; earlier change points are
    /// kept. Triage state of change points found again is preserved.
    pub fn detect(&self, filter: &KeyFilter, params: &CpdParams) -> Result<DetectSummary> {
        params.validate()?;
        let keys = self.read().matching_keys(filter)?;
        let mut summary = DetectSummary::default();
        for key in keys {
            let n = self.detect_key(&key, params)?;
            summary.keys += 1;
            summary.change_points += n;
            summary.per_key.insert(key.to_string(), n);
        }
        Ok(summary)
    }

    fn detect_key(&self, key: &MetricKey, params: &CpdParams) -> Result<usize> {
        // Detection runs outside the lock on a snapshot.
        let (series, previous) = {
            let state = self.read();
            (state.series(key, false)?, state.change_points(key).to_vec())
        };
        let values = series.values();
        let tail_start = series.len().saturating_sub(DETECTION_TAIL_WINDOW);
        let tail_order = series.points.get(tail_start).map_or(i64::MIN, |p| p.order);

        let mut detections = Vec::new();
        for cp in previous.iter().filter(|cp| cp.order_index < tail_order) {
            if let Some(position) = series.points.iter().position(|p| p.order == cp.order_index) {
                detections.push(changepoint::Detection { position, qhat: cp.qhat, p_value: cp.p_value });
            }
        }
        let fresh = changepoint::detect_positions(&values[tail_start..], params)?;
        detections.extend(fresh.into_iter().map(|d| changepoint::Detection { position: d.position + tail_start, ..d }));
        detections.sort_by_key(|d| d.position);
        detections.dedup_by_key(|d| d.position);

        self.mutate(|state, now| {
            // Something else may have written to this series meanwhile.
            if state.series(key, false)? != series {
                return Err(Error::Conflict(format!("series {key} changed during detection")));
            }
            let mut cps = changepoint::change_points_at(&series, &detections, now)?;
            let is_canary = state.is_canary_test(&key.test);
            let existing = state.change_points(key);
            for cp in &mut cps {
                cp.is_canary = is_canary;
                if let Some(old) = existing.iter().find(|o| o.id == cp.id) {
                    if old.order_index < tail_order {
                        *cp = old.clone();
                        continue;
                    }
                    cp.calculated_on = old.calculated_on;
                    cp.triage_state = old.triage_state;
                    cp.ticket_id = old.ticket_id.clone();
                    cp.version = old.version;
                }
            }
            // Triaged change points that were not found again are kept.
            for old in existing {
                if old.triage_state != changepoint::TriageState::Untriaged && !cps.iter().any(|c| c.id == old.id) {
                    cps.push(old.clone());
                }
            }
            cps.sort_by_key(|c| c.order_index);
            let n = cps.len();
            let unchanged = cps.as_slice() == existing;
            let entry = (!unchanged).then(|| JournalEntry::SetChangePoints { key: key.clone(), change_points: cps });
            Ok((entry, n))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MetricScope;
    use chrono::TimeZone;

    fn scope() -> MetricScope {
        MetricScope { project: "sys-perf".into(), configuration: "linux-1".into(), task: "ycsb".into() }
    }

    fn run(id: &str, revision: &str, order: i64) -> TestRun {
        let base = Utc.with_ymd_and_hms(2020, 3, 1, 0, 0, 0).unwrap();
        TestRun {
            run_id: id.into(),
            scope: scope(),
            revision: revision.into(),
            order,
            commit_date: base + chrono::Duration::days(order),
            executed_at: base + chrono::Duration::days(order) + chrono::Duration::hours(1),
            suppressed: false,
            rerun_index: 0,
        }
    }

    fn key() -> MetricKey {
        scope().key("ycsb_load", "Throughput")
    }

    #[test]
    fn preaggregated_store_and_fetch() {
        let store = Store::in_memory();
        store.register_run(run("a", "r1", 1)).unwrap();
        let stored = store.ingest_preaggregated(&"a".into(), vec![(key(), 12345.6)]).unwrap();
        assert_eq!(stored[0].source, MeasurementSource::PreAggregated);
        let s = store.get_series(&key(), false).unwrap();
        assert_eq!(s.values(), vec![12345.6]);

        assert!(store.ingest_preaggregated(&"a".into(), vec![]).unwrap().is_empty());
        assert!(matches!(store.ingest_preaggregated(&"a".into(), vec![(key(), 1.0)]), Err(Error::Conflict(_))));
    }

    #[test]
    fn duplicate_key_in_one_call_conflicts() {
        let store = Store::in_memory();
        store.register_run(run("a", "r1", 1)).unwrap();
        let res = store.ingest_preaggregated(&"a".into(), vec![(key(), 1.0), (key(), 2.0)]);
        assert!(matches!(res, Err(Error::Conflict(_))));
        assert!(store.get_series(&key(), true).is_err());
    }

    #[test]
    fn unknown_run_is_not_found() {
        let store = Store::in_memory();
        let ev = RawEvent { run_id: "zz".into(), test: "t".into(), op_index: 0, duration_ns: 5, worker: 0 };
        assert!(matches!(store.ingest_raw(&"zz".into(), vec![ev]), Err(Error::NotFound(_))));
        assert!(matches!(store.ingest_preaggregated(&"zz".into(), vec![(key(), 1.0)]), Err(Error::NotFound(_))));
    }

    #[test]
    fn series_orders_and_suppression() {
        let store = Store::in_memory();
        for (id, rev, order) in [("c", "r3", 3), ("a", "r1", 1), ("b", "r2", 2)] {
            store.register_run(run(id, rev, order)).unwrap();
            store.ingest_preaggregated(&id.into(), vec![(key(), order as f64)]).unwrap();
        }
        let s = store.get_series(&key(), false).unwrap();
        assert_eq!(s.values(), vec![1.0, 2.0, 3.0]);

        store.set_run_suppressed(&"b".into(), true).unwrap();
        assert_eq!(store.get_series(&key(), false).unwrap().len(), 2);
        assert_eq!(store.get_series(&key(), true).unwrap().len(), 3);
    }

    #[test]
    fn rerun_replaces_earlier_run_of_same_revision() {
        let store = Store::in_memory();
        store.register_run(run("a", "r1", 1)).unwrap();
        let mut again = run("a2", "r1", 1);
        again.rerun_index = 1;
        again.executed_at += chrono::Duration::hours(2);
        store.register_run(again).unwrap();
        store.ingest_preaggregated(&"a".into(), vec![(key(), 10.0)]).unwrap();
        store.ingest_preaggregated(&"a2".into(), vec![(key(), 20.0)]).unwrap();
        assert_eq!(store.get_series(&key(), false).unwrap().values(), vec![20.0]);
        assert_eq!(store.get_series(&key(), true).unwrap().values(), vec![10.0, 20.0]);
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perf.db");
        {
            let store = Store::open(&path).unwrap();
            store.register_run(run("a", "r1", 1)).unwrap();
            store.ingest_preaggregated(&"a".into(), vec![(key(), 3.5)]).unwrap();
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.get_series(&key(), false).unwrap().values(), vec![3.5]);
    }

    #[test]
    fn key_filter_matching() {
        let filter = KeyFilter {
            test: Some("ycsb_load".into()),
            measurement_regex: Some("^Latency".into()),
            ..KeyFilter::default()
        };
        let compiled = filter.compile().unwrap();
        assert!(compiled.matches(&scope().key("ycsb_load", "Latency95thPercentile")));
        assert!(!compiled.matches(&scope().key("ycsb_load", "Throughput")));
        assert!(!compiled.matches(&scope().key("other", "Latency95thPercentile")));
    }
}
