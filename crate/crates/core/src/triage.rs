//! Triage workflow over detected change points: grouping by revision,
//! state transitions, tickets and summary reports.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::changepoint::{ChangePoint, TriageState};
use crate::error::{compile_regex, Error, Result};
use crate::model::{Resolution, RootCause, Ticket};
use crate::store::{JournalEntry, State, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Acknowledge,
    Hide,
    CreateTicket,
    LinkTicket,
    LabelRootCause,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ActionKind::Acknowledge => "ACKNOWLEDGE",
            ActionKind::Hide => "HIDE",
            ActionKind::CreateTicket => "CREATE_TICKET",
            ActionKind::LinkTicket => "LINK_TICKET",
            ActionKind::LabelRootCause => "LABEL_ROOT_CAUSE",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ACKNOWLEDGE" => Ok(ActionKind::Acknowledge),
            "HIDE" => Ok(ActionKind::Hide),
            "CREATE_TICKET" => Ok(ActionKind::CreateTicket),
            "LINK_TICKET" => Ok(ActionKind::LinkTicket),
            "LABEL_ROOT_CAUSE" => Ok(ActionKind::LabelRootCause),
            _ => Err(Error::Validation(format!("unknown triage action {s:?}"))),
        }
    }
}

impl ActionKind {
    /// State reached by each member, or `None` when states are unchanged.
    fn target_state(self) -> Option<TriageState> {
        match self {
            ActionKind::Acknowledge => Some(TriageState::Acknowledged),
            ActionKind::Hide => Some(TriageState::Hidden),
            ActionKind::CreateTicket | ActionKind::LinkTicket => Some(TriageState::Ticketed),
            ActionKind::LabelRootCause => None,
        }
    }
}

pub fn is_legal(from: TriageState, to: TriageState) -> bool {
    use TriageState::*;
    matches!(
        (from, to),
        (Untriaged, Acknowledged) | (Untriaged, Hidden) | (Untriaged, Ticketed) | (Acknowledged, Ticketed)
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionPayload {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ticket_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<RootCause>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
}

/// What a transition applies to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Targets {
    pub ids: Vec<String>,
    /// Every non-canary change point of this revision.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub actor: String,
    pub action: ActionKind,
    #[serde(default)]
    pub targets: Targets,
    #[serde(default)]
    pub payload: ActionPayload,
    /// Versions the caller last saw, by change point id.
    #[serde(default)]
    pub expected_versions: BTreeMap<String, u64>,
}

/// Audit record of an accepted transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageAction {
    pub actor: String,
    pub targets: Vec<String>,
    pub action: ActionKind,
    pub payload: ActionPayload,
    pub at: DateTime<Utc>,
}

/// Audit record of a ticket label change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketEvent {
    pub ticket_id: String,
    pub actor: String,
    pub root_cause: RootCause,
    pub resolution: Resolution,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    pub change_points: Vec<ChangePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ticket: Option<Ticket>,
}

/// Half-open time interval; missing bounds are open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
}

impl TimeRange {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageFilter {
    /// Matched against the measurement component of the key.
    pub measurement_regex: Option<String>,
    pub state: Option<TriageState>,
    pub date_range: TimeRange,
    pub calculated_on_range: TimeRange,
    pub include_canaries: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageGroup {
    pub revision: String,
    pub commit_date: DateTime<Utc>,
    pub change_points: Vec<ChangePoint>,
    pub state_summary: BTreeMap<TriageState, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootCauseShare {
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub days: f64,
    pub total: usize,
    pub resolved: usize,
    pub percent_resolved: f64,
    pub tickets_per_day: f64,
    pub root_causes: BTreeMap<RootCause, RootCauseShare>,
    pub improvements: usize,
    pub regressions: usize,
    pub days_per_improvement: Option<f64>,
    pub days_per_regression: Option<f64>,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 * 100.0 / whole as f64
    }
}

/// Counts over tickets created in `[start, end)`.
pub fn summarize<'a>(
    tickets: impl IntoIterator<Item = &'a Ticket>,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<SummaryReport> {
    if end < start {
        return Err(Error::Validation(format!("period end {end} precedes start {start}")));
    }
    let period = TimeRange { start: Some(start), end: Some(end) };
    let selected: Vec<&Ticket> = tickets.into_iter().filter(|t| period.contains(t.created_at)).collect();
    let total = selected.len();
    let days = (end - start).num_milliseconds() as f64 / 86_400_000.0;
    let resolved = selected.iter().filter(|t| t.resolution != Resolution::Open).count();
    let count_of = |r: Resolution| selected.iter().filter(|t| t.resolution == r).count();
    let improvements = count_of(Resolution::Improvement);
    let regressions = count_of(Resolution::RegressionAccepted);
    let per = |n: usize| (n > 0).then(|| days / n as f64);
    let root_causes = RootCause::ALL
        .into_iter()
        .map(|rc| {
            let count = selected.iter().filter(|t| t.root_cause == rc).count();
            (rc, RootCauseShare { count, percent: percent(count, total) })
        })
        .collect();
    Ok(SummaryReport {
        start,
        end,
        days,
        total,
        resolved,
        percent_resolved: percent(resolved, total),
        tickets_per_day: if days > 0.0 { total as f64 / days } else { 0.0 },
        root_causes,
        improvements,
        regressions,
        days_per_improvement: per(improvements),
        days_per_regression: per(regressions),
    })
}

impl State {
    fn is_canary_change_point(&self, cp: &ChangePoint) -> bool {
        cp.is_canary || self.is_canary_test(&cp.key.test)
    }

    /// Change points passing the filter, grouped by revision, newest commit
    /// first.
    pub fn list_groups(&self, filter: &TriageFilter) -> Result<Vec<TriageGroup>> {
        let re = filter.measurement_regex.as_deref().map(compile_regex).transpose()?;
        let mut groups: BTreeMap<&str, Vec<ChangePoint>> = BTreeMap::new();
        for cp in self.all_change_points() {
            let keep = (filter.include_canaries || !self.is_canary_change_point(cp))
                && re.as_ref().is_none_or(|re| re.is_match(&cp.key.measurement))
                && filter.state.is_none_or(|s| cp.triage_state == s)
                && filter.date_range.contains(cp.commit_date)
                && filter.calculated_on_range.contains(cp.calculated_on);
            if keep {
                groups.entry(cp.revision.as_str()).or_default().push(cp.clone());
            }
        }
        let mut out: Vec<TriageGroup> = groups
            .into_iter()
            .map(|(revision, mut members)| {
                members.sort_by(|a, b| a.key.cmp(&b.key).then(a.order_index.cmp(&b.order_index)));
                let mut state_summary = BTreeMap::new();
                for m in &members {
                    *state_summary.entry(m.triage_state).or_default() += 1;
                }
                TriageGroup {
                    revision: revision.to_string(),
                    commit_date: members.iter().map(|m| m.commit_date).max().expect("non-empty"),
                    change_points: members,
                    state_summary,
                }
            })
            .collect();
        out.sort_by(|a, b| b.commit_date.cmp(&a.commit_date).then_with(|| a.revision.cmp(&b.revision)));
        Ok(out)
    }

    pub fn change_point(&self, id: &str) -> Result<&ChangePoint> {
        self.all_change_points().find(|cp| cp.id == id).ok_or_else(|| Error::NotFound(format!("change point {id}")))
    }

    fn resolve_targets(&self, targets: &Targets) -> Result<Vec<ChangePoint>> {
        let mut ids: BTreeSet<&str> = targets.ids.iter().map(String::as_str).collect();
        if let Some(revision) = &targets.group {
            let before = ids.len();
            ids.extend(
                self.all_change_points()
                    .filter(|cp| &cp.revision == revision && !self.is_canary_change_point(cp))
                    .map(|cp| cp.id.as_str()),
            );
            if ids.len() == before && targets.ids.is_empty() {
                return Err(Error::NotFound(format!("no change points at revision {revision}")));
            }
        }
        if ids.is_empty() {
            return Err(Error::Validation("no transition targets".into()));
        }
        ids.into_iter().map(|id| self.change_point(id).cloned()).collect()
    }
}

impl Store {
    pub fn list_groups(&self, filter: &TriageFilter) -> Result<Vec<TriageGroup>> {
        self.read().list_groups(filter)
    }

    /// Applies a triage action to a set of change points, all or nothing.
    pub fn transition(&self, req: TransitionRequest) -> Result<TransitionOutcome> {
        if req.actor.trim().is_empty() {
            return Err(Error::Validation("actor must not be empty".into()));
        }
        self.mutate(|state, now| {
            let mut members = state.resolve_targets(&req.targets)?;
            for cp in &members {
                if let Some(&expected) = req.expected_versions.get(&cp.id) {
                    if expected != cp.version {
                        return Err(Error::VersionConflict { id: cp.id.clone(), expected, found: cp.version });
                    }
                }
                if let Some(to) = req.action.target_state() {
                    if !is_legal(cp.triage_state, to) {
                        return Err(Error::IllegalTransition {
                            id: cp.id.clone(),
                            current: cp.triage_state.to_string(),
                            action: req.action.to_string(),
                        });
                    }
                }
            }
            let ids: Vec<String> = members.iter().map(|cp| cp.id.clone()).collect();

            let ticket = match req.action {
                ActionKind::Acknowledge | ActionKind::Hide => None,
                ActionKind::CreateTicket => Some(Ticket {
                    ticket_id: format!("PERF-{}", state.next_ticket),
                    summary: req
                        .payload
                        .summary
                        .clone()
                        .unwrap_or_else(|| format!("Performance change at {}", members[0].revision)),
                    root_cause: RootCause::Unlabeled,
                    resolution: Resolution::Open,
                    created_at: now,
                    resolved_at: None,
                    change_points: ids.clone(),
                }),
                ActionKind::LinkTicket => {
                    let id = req
                        .payload
                        .ticket_id
                        .as_deref()
                        .ok_or_else(|| Error::Validation("LINK_TICKET requires payload.ticket_id".into()))?;
                    let mut t = state.ticket(id).cloned().ok_or_else(|| Error::NotFound(format!("ticket {id}")))?;
                    for cp in &ids {
                        if !t.change_points.contains(cp) {
                            t.change_points.push(cp.clone());
                        }
                    }
                    Some(t)
                }
                ActionKind::LabelRootCause => {
                    let root_cause = req
                        .payload
                        .root_cause
                        .ok_or_else(|| Error::Validation("LABEL_ROOT_CAUSE requires payload.root_cause".into()))?;
                    let linked: BTreeSet<&str> = members.iter().filter_map(|cp| cp.ticket_id.as_deref()).collect();
                    let id = match (linked.len(), members.iter().all(|cp| cp.ticket_id.is_some())) {
                        (1, true) => *linked.first().expect("one ticket"),
                        _ => return Err(Error::Validation("LABEL_ROOT_CAUSE targets must share one ticket".into())),
                    };
                    let t = state.ticket(id).ok_or_else(|| Error::NotFound(format!("ticket {id}")))?;
                    Some(relabel(t, root_cause, req.payload.resolution, now))
                }
            };

            for cp in &mut members {
                if let Some(to) = req.action.target_state() {
                    cp.triage_state = to;
                }
                if matches!(req.action, ActionKind::CreateTicket | ActionKind::LinkTicket) {
                    cp.ticket_id = ticket.as_ref().map(|t| t.ticket_id.clone());
                }
                cp.version += 1;
            }
            let mut payload = req.payload.clone();
            if let Some(t) = &ticket {
                payload.ticket_id = Some(t.ticket_id.clone());
            }
            let action = TriageAction { actor: req.actor.clone(), targets: ids, action: req.action, payload, at: now };
            let entry = JournalEntry::Triage { change_points: members.clone(), action, ticket: ticket.clone() };
            Ok((Some(entry), TransitionOutcome { change_points: members, ticket }))
        })
    }

    /// Sets root cause and, optionally, resolution on a ticket.
    pub fn label_ticket(
        &self,
        ticket_id: &str,
        root_cause: RootCause,
        resolution: Option<Resolution>,
        actor: &str,
    ) -> Result<Ticket> {
        self.mutate(|state, now| {
            let t = state.ticket(ticket_id).ok_or_else(|| Error::NotFound(format!("ticket {ticket_id}")))?;
            let updated = relabel(t, root_cause, resolution, now);
            let event = TicketEvent {
                ticket_id: ticket_id.to_string(),
                actor: actor.to_string(),
                root_cause: updated.root_cause,
                resolution: updated.resolution,
                at: now,
            };
            Ok((Some(JournalEntry::UpdateTicket { ticket: updated.clone(), event }), updated))
        })
    }

    pub fn summary_report(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<SummaryReport> {
        summarize(self.read().tickets(), start, end)
    }
}

fn relabel(t: &Ticket, root_cause: RootCause, resolution: Option<Resolution>, now: DateTime<Utc>) -> Ticket {
    let resolution = resolution.unwrap_or(t.resolution);
    let resolved_at = match resolution {
        Resolution::Open => None,
        _ => t.resolved_at.or(Some(now)),
    };
    Ticket { root_cause, resolution, resolved_at, ..t.clone() }
}
