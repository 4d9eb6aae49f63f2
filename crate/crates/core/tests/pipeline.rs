use std::collections::BTreeSet;

use chrono::{Duration, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use perfbaron_core::changepoint::CpdParams;
use perfbaron_core::model::{MetricScope, RunId, TestRun};
use perfbaron_core::triage::{ActionKind, ActionPayload, Targets, TransitionRequest, TriageFilter};
use perfbaron_core::{KeyFilter, Store};

const MEASUREMENTS: [&str; 3] = ["Throughput", "Latency50thPercentile", "Latency95thPercentile"];

fn scope() -> MetricScope {
    MetricScope { project: "p".into(), configuration: "c".into(), task: "t".into() }
}

fn populate(store: &Store) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
    for order in 0..50i64 {
        let run = store
            .register_run(TestRun {
                run_id: RunId(format!("r{order}")),
                scope: scope(),
                revision: format!("rev{order}"),
                order,
                commit_date: t0 + Duration::hours(order),
                executed_at: t0 + Duration::hours(order + 1),
                suppressed: false,
                rerun_index: 0,
            })
            .unwrap();
        let mut values = Vec::new();
        for (i, test) in ["insert", "query", "canary_io"].iter().enumerate() {
            for (j, m) in MEASUREMENTS.iter().enumerate() {
                let at = 15 + 10 * ((i + j) % 3) as i64;
                let level = if order >= at { 80.0 } else { 40.0 };
                values.push((scope().key(test, m), level + noise.sample(&mut rng)));
            }
        }
        store.ingest_preaggregated(&run.run_id, values).unwrap();
    }
    store.detect(&KeyFilter::all(), &CpdParams::default()).unwrap();
}

fn members(store: &Store, filter: &TriageFilter) -> Vec<String> {
    store.list_groups(filter).unwrap().into_iter().flat_map(|g| g.change_points.into_iter().map(|cp| cp.id)).collect()
}

#[test]
fn groups_partition_and_commute_with_regex() {
    let store = Store::in_memory();
    populate(&store);
    let groups = store.list_groups(&TriageFilter::default()).unwrap();
    assert!(groups.len() >= 3);
    let ids = members(&store, &TriageFilter::default());
    let unique: BTreeSet<_> = ids.iter().cloned().collect();
    assert_eq!(unique.len(), ids.len());
    for g in &groups {
        assert!(g.change_points.iter().all(|cp| cp.revision == g.revision && !cp.is_canary));
    }

    for regex in ["Throughput", "^Latency", "95th|Through", "x^"] {
        let re = regex::Regex::new(regex).unwrap();
        let filtered = members(&store, &TriageFilter { measurement_regex: Some(regex.into()), ..Default::default() });
        let expected: Vec<String> = store
            .list_groups(&TriageFilter::default())
            .unwrap()
            .into_iter()
            .flat_map(|g| g.change_points)
            .filter(|cp| re.is_match(&cp.key.measurement))
            .map(|cp| cp.id)
            .collect();
        assert_eq!(filtered, expected, "{regex}");
    }

    let all = members(&store, &TriageFilter { include_canaries: true, ..Default::default() });
    assert!(all.len() > ids.len());
}

#[test]
fn journal_replay_restores_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("perfbaron.db");
    let (cps, log, tickets) = {
        let store = Store::open(&path).unwrap();
        populate(&store);
        let group = store.list_groups(&TriageFilter::default()).unwrap()[0].revision.clone();
        store
            .transition(TransitionRequest {
                actor: "a".into(),
                action: ActionKind::CreateTicket,
                targets: Targets { ids: Vec::new(), group: Some(group) },
                payload: ActionPayload { summary: Some("drop".into()), ..Default::default() },
                expected_versions: Default::default(),
            })
            .unwrap();
        let state = store.read();
        (
            state.all_change_points().cloned().collect::<Vec<_>>(),
            state.triage_log().to_vec(),
            state.tickets().cloned().collect::<Vec<_>>(),
        )
    };
    let reopened = Store::open(&path).unwrap();
    let state = reopened.read();
    assert_eq!(state.all_change_points().cloned().collect::<Vec<_>>(), cps);
    assert_eq!(state.triage_log(), log.as_slice());
    assert_eq!(state.tickets().cloned().collect::<Vec<_>>(), tickets);
    assert_eq!(tickets.len(), 1);
}
