//! Canary policy: turns outliers on testbed-health tests into suppress,
//! rerun and mute decisions.
//!
//! Outlier checks always run and are always stored. Whether they have any
//! effect depends on [`PolicyConfig::enabled`] (off by default), the rerun
//! cap and active mutes.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::changepoint::ChangePoint;
use crate::error::{compile_regex, Error, Result};
use crate::model::{MetricKey, RunId, Series, TestRun};
use crate::outlier::{self, GesdParams, OutlierReport};
use crate::store::{JournalEntry, State, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub enabled: bool,
    pub max_reruns: u32,
    pub gesd: GesdParams,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { enabled: false, max_reruns: 3, gesd: GesdParams::default() }
    }
}

/// Half-open commit-order range; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRange {
    pub start: Option<i64>,
    pub end: Option<i64>,
}

impl OrderRange {
    pub fn contains(&self, order: i64) -> bool {
        self.start.is_none_or(|s| order >= s) && self.end.is_none_or(|e| order < e)
    }
}

/// Request body for creating a mute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewMute {
    /// Regex matched against `project/configuration/task/test/measurement`.
    pub key_pattern: String,
    #[serde(default)]
    pub order_range: OrderRange,
    pub created_by: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mute {
    pub id: u64,
    pub key_pattern: String,
    pub order_range: OrderRange,
    pub created_by: String,
    pub reason: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expired_at: Option<DateTime<Utc>>,
}

impl Mute {
    pub fn is_active(&self, at: DateTime<Utc>) -> bool {
        self.expired_at.is_none_or(|e| e > at)
    }
}

/// Mutes compiled for matching.
pub struct MuteSet {
    rules: Vec<(regex::Regex, OrderRange)>,
}

impl MuteSet {
    /// Active mutes only; expired ones behave as absent.
    pub fn new<'a>(mutes: impl IntoIterator<Item = &'a Mute>, at: DateTime<Utc>) -> Result<Self> {
        let mut rules = Vec::new();
        for m in mutes.into_iter().filter(|m| m.is_active(at)) {
            rules.push((compile_regex(&m.key_pattern)?, m.order_range));
        }
        Ok(MuteSet { rules })
    }

    pub fn mutes(&self, key: &MetricKey, order: i64) -> bool {
        let text = key.to_string();
        self.rules.iter().any(|(re, range)| range.contains(order) && re.is_match(&text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Accept,
    SuppressAndRerun,
    SuppressOnly,
    MutedSkip,
    DisabledLogOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryDecision {
    pub task_run_id: RunId,
    pub verdict: Verdict,
    pub triggering_keys: Vec<MetricKey>,
    pub decided_at: DateTime<Utc>,
    pub rerun_index: u32,
}

/// Request for the external runner to execute a task again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescheduleRecord {
    pub task_run_id: RunId,
    pub reason: String,
    /// Index the rerun must be registered with.
    pub rerun_index: u32,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredOutlierReport {
    pub task_run_id: RunId,
    pub key: MetricKey,
    pub report: OutlierReport,
    pub latest_is_outlier: bool,
    pub computed_at: DateTime<Utc>,
}

/// A canary series with the change points known for it.
#[derive(Debug, Clone, PartialEq)]
pub struct CanarySeries {
    pub series: Series,
    pub change_points: Vec<ChangePoint>,
}

impl From<Series> for CanarySeries {
    fn from(series: Series) -> Self {
        CanarySeries { series, change_points: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryEvaluation {
    pub decision: CanaryDecision,
    pub reports: Vec<StoredOutlierReport>,
    pub reschedule: Option<RescheduleRecord>,
    pub suppress: bool,
}

/// Decides what to do with a task run given its canary series.
///
/// `prior_reruns` is the number of reruns already requested for the same
/// task and revision. Series that do not end at `task_run` are skipped.
pub fn evaluate_task(
    task_run: &TestRun,
    canary_series: &[CanarySeries],
    config: &PolicyConfig,
    mutes: &MuteSet,
    prior_reruns: u32,
    now: DateTime<Utc>,
) -> Result<CanaryEvaluation> {
    let mut reports = Vec::new();
    let mut triggering = Vec::new();
    for cs in canary_series {
        if cs.series.points.last().is_none_or(|p| p.run_id != task_run.run_id) {
            continue;
        }
        if let Some(check) = outlier::check_latest_point(&cs.series, &cs.change_points, &config.gesd)? {
            if check.is_outlier {
                triggering.push(cs.series.key.clone());
            }
            reports.push(StoredOutlierReport {
                task_run_id: task_run.run_id.clone(),
                key: cs.series.key.clone(),
                report: check.report,
                latest_is_outlier: check.is_outlier,
                computed_at: now,
            });
        }
    }

    let unmuted = triggering.iter().filter(|k| !mutes.mutes(k, task_run.order)).count();
    let can_rerun = task_run.rerun_index < config.max_reruns && prior_reruns < config.max_reruns;
    let verdict = if !config.enabled {
        Verdict::DisabledLogOnly
    } else if triggering.is_empty() {
        Verdict::Accept
    } else if unmuted == 0 {
        Verdict::MutedSkip
    } else if can_rerun {
        Verdict::SuppressAndRerun
    } else {
        Verdict::SuppressOnly
    };

    let reschedule = (verdict == Verdict::SuppressAndRerun).then(|| RescheduleRecord {
        task_run_id: task_run.run_id.clone(),
        reason: format!(
            "canary outlier on {}",
            triggering.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        ),
        rerun_index: task_run.rerun_index + 1,
        decided_at: now,
    });
    let suppress = matches!(verdict, Verdict::SuppressAndRerun | Verdict::SuppressOnly);
    Ok(CanaryEvaluation {
        decision: CanaryDecision {
            task_run_id: task_run.run_id.clone(),
            verdict,
            triggering_keys: triggering,
            decided_at: now,
            rerun_index: task_run.rerun_index,
        },
        reports,
        reschedule,
        suppress,
    })
}

impl State {
    /// Canary series of the run's task, each cut off at the run.
    fn canary_inputs(&self, run: &TestRun) -> Result<Vec<CanarySeries>> {
        let mut out = Vec::new();
        for key in self.keys().filter(|k| k.scope() == run.scope && self.is_canary_test(&k.test)) {
            if self.measurement(key, &run.run_id).is_none() {
                continue;
            }
            let mut series = self.series(key, false)?;
            let Some(pos) = series.points.iter().position(|p| p.run_id == run.run_id) else {
                continue;
            };
            series.points.truncate(pos + 1);
            let change_points =
                self.change_points(key).iter().filter(|cp| cp.order_index <= run.order).cloned().collect();
            out.push(CanarySeries { series, change_points });
        }
        Ok(out)
    }

    fn reruns_requested(&self, run: &TestRun) -> u32 {
        self.decisions
            .iter()
            .filter(|d| d.verdict == Verdict::SuppressAndRerun)
            .filter_map(|d| self.runs.get(&d.task_run_id))
            .filter(|r| r.scope == run.scope && r.revision == run.revision)
            .count() as u32
    }
}

impl Store {
    /// Evaluates the canary policy for a task run and persists the decision,
    /// every outlier report, and (when rerunning) a reschedule record.
    pub fn evaluate_canaries(&self, run_id: &RunId) -> Result<CanaryEvaluation> {
        self.mutate(|state, now| {
            let run = state.run(run_id)?;
            if state.decisions.iter().any(|d| &d.task_run_id == run_id) {
                return Err(Error::Conflict(format!("run {run_id} already evaluated")));
            }
            let inputs = state.canary_inputs(run)?;
            let mutes = MuteSet::new(state.mutes.values(), now)?;
            let prior = state.reruns_requested(run);
            let eval = evaluate_task(run, &inputs, &state.policy, &mutes, prior, now)?;
            let entry = JournalEntry::CanaryEvaluated {
                decision: eval.decision.clone(),
                reports: eval.reports.clone(),
                reschedule: eval.reschedule.clone(),
                suppress_run: eval.suppress.then(|| run_id.clone()),
            };
            Ok((Some(entry), eval))
        })
    }

    pub fn apply_mute(&self, mute: NewMute) -> Result<Mute> {
        compile_regex(&mute.key_pattern)?;
        if let (Some(s), Some(e)) = (mute.order_range.start, mute.order_range.end) {
            if s >= e {
                return Err(Error::Validation(format!("empty order range [{s}, {e})")));
            }
        }
        if mute.created_by.trim().is_empty() {
            return Err(Error::Validation("created_by must not be empty".into()));
        }
        self.mutate(|state, now| {
            let stored = Mute {
                id: state.next_mute,
                key_pattern: mute.key_pattern,
                order_range: mute.order_range,
                created_by: mute.created_by,
                reason: mute.reason,
                created_at: now,
                expired_at: None,
            };
            Ok((Some(JournalEntry::PutMute { mute: stored.clone() }), stored))
        })
    }

    pub fn list_mutes(&self, include_expired: bool) -> Vec<Mute> {
        let state = self.read();
        let now = self.now();
        state.mutes().filter(|m| include_expired || m.is_active(now)).cloned().collect()
    }

    pub fn expire_mute(&self, id: u64) -> Result<Mute> {
        self.mutate(|state, now| {
            let mute = state.mutes.get(&id).ok_or_else(|| Error::NotFound(format!("mute {id}")))?;
            if !mute.is_active(now) {
                return Err(Error::Conflict(format!("mute {id} already expired")));
            }
            let expired = Mute { expired_at: Some(now), ..mute.clone() };
            Ok((Some(JournalEntry::ExpireMute { id, at: now }), expired))
        })
    }

    /// Decisions, optionally for one run.
    pub fn canary_decisions(&self, run_id: Option<&RunId>) -> Vec<CanaryDecision> {
        self.read().decisions().iter().filter(|d| run_id.is_none_or(|r| &d.task_run_id == r)).cloned().collect()
    }

    /// Decision counts by verdict.
    pub fn verdict_counts(&self) -> BTreeMap<Verdict, usize> {
        let mut counts = BTreeMap::new();
        for d in self.read().decisions() {
            *counts.entry(d.verdict).or_default() += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetricScope, SeriesPoint};
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap()
    }

    fn run(rerun_index: u32) -> TestRun {
        TestRun {
            run_id: RunId(format!("task-{rerun_index}")),
            scope: MetricScope { project: "p".into(), configuration: "c".into(), task: "t".into() },
            revision: "abc".into(),
            order: 60,
            commit_date: t0(),
            executed_at: t0(),
            suppressed: false,
            rerun_index,
        }
    }

    fn canary(last: f64, run: &TestRun) -> CanarySeries {
        let key = run.scope.key("canary_cpu", "Throughput");
        let mut points: Vec<SeriesPoint> = (0..60)
            .map(|i| SeriesPoint {
                order: i,
                revision: format!("r{i}"),
                commit_date: t0(),
                value: 100.0 + ((i * 37) % 11) as f64 * 0.1,
                run_id: RunId(format!("old{i}")),
                suppressed: false,
            })
            .collect();
        points.push(SeriesPoint {
            order: run.order,
            revision: run.revision.clone(),
            commit_date: t0(),
            value: last,
            run_id: run.run_id.clone(),
            suppressed: false,
        });
        Series { key, points }.into()
    }

    fn enabled() -> PolicyConfig {
        PolicyConfig {
            enabled: true,
            gesd: GesdParams { window: 50, ..GesdParams::default() },
            ..PolicyConfig::default()
        }
    }

    fn no_mutes() -> MuteSet {
        MuteSet::new(&[], t0()).unwrap()
    }

    #[test]
    fn decision_table() {
        let r0 = run(0);
        let e = evaluate_task(&r0, &[canary(1000.0, &r0)], &enabled(), &no_mutes(), 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::SuppressAndRerun);
        assert!(e.suppress);
        assert_eq!(e.reschedule.as_ref().unwrap().rerun_index, 1);

        let r3 = run(3);
        let e = evaluate_task(&r3, &[canary(1000.0, &r3)], &enabled(), &no_mutes(), 3, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::SuppressOnly);
        assert!(e.suppress && e.reschedule.is_none());

        let off = PolicyConfig { enabled: false, ..enabled() };
        let e = evaluate_task(&r0, &[canary(1000.0, &r0)], &off, &no_mutes(), 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::DisabledLogOnly);
        assert!(!e.suppress && e.reschedule.is_none());
        assert_eq!(e.decision.triggering_keys.len(), 1);
        assert_eq!(e.reports.len(), 1);

        let e = evaluate_task(&r0, &[canary(100.4, &r0)], &enabled(), &no_mutes(), 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::Accept);
    }

    #[test]
    fn missing_history_accepts() {
        let r0 = run(0);
        let mut short = canary(1000.0, &r0);
        short.series.points.drain(..55);
        let e = evaluate_task(&r0, &[short], &enabled(), &no_mutes(), 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::Accept);
        assert!(e.reports.is_empty());
        let e = evaluate_task(&r0, &[], &enabled(), &no_mutes(), 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::Accept);
    }

    #[test]
    fn mutes_skip_and_expire() {
        let r0 = run(0);
        let mute = Mute {
            id: 1,
            key_pattern: "^p/c/".into(),
            order_range: OrderRange::default(),
            created_by: "baron".into(),
            reason: "testbed got faster".into(),
            created_at: t0(),
            expired_at: None,
        };
        let set = MuteSet::new([&mute], t0()).unwrap();
        let e = evaluate_task(&r0, &[canary(1000.0, &r0)], &enabled(), &set, 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::MutedSkip);
        assert_eq!(e.reports.len(), 1);

        let expired = Mute { expired_at: Some(t0()), ..mute.clone() };
        let set = MuteSet::new([&expired], t0()).unwrap();
        let e = evaluate_task(&r0, &[canary(1000.0, &r0)], &enabled(), &set, 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::SuppressAndRerun);

        let outside = Mute { order_range: OrderRange { start: Some(0), end: Some(10) }, ..mute };
        let set = MuteSet::new([&outside], t0()).unwrap();
        let e = evaluate_task(&r0, &[canary(1000.0, &r0)], &enabled(), &set, 0, t0()).unwrap();
        assert_eq!(e.decision.verdict, Verdict::SuppressAndRerun);
    }

    #[test]
    fn overlapping_mutes_union() {
        let mk = |id, pattern: &str, range| Mute {
            id,
            key_pattern: pattern.into(),
            order_range: range,
            created_by: "b".into(),
            reason: String::new(),
            created_at: t0(),
            expired_at: None,
        };
        let a = mk(1, "canary_cpu", OrderRange { start: Some(0), end: Some(50) });
        let b = mk(2, "canary_cpu", OrderRange { start: Some(40), end: None });
        let set = MuteSet::new([&a, &b], t0()).unwrap();
        let key = MetricKey::new("p", "c", "t", "canary_cpu", "Throughput").unwrap();
        for order in [0, 45, 60, 1000] {
            assert!(set.mutes(&key, order));
        }
        assert!(!set.mutes(&key, -1));
    }

    #[test]
    fn malformed_pattern_rejected() {
        let store = Store::in_memory();
        let res = store.apply_mute(NewMute {
            key_pattern: "canary_(".into(),
            order_range: OrderRange::default(),
            created_by: "b".into(),
            reason: String::new(),
        });
        assert!(matches!(res, Err(Error::InvalidRegex { .. })));
    }
}
