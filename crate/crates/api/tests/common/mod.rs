#![allow(dead_code)]

use chrono::{DateTime, Duration, TimeZone, Utc};
use perfbaron_core::model::{MetricKey, MetricScope, RunId, TestRun};
use perfbaron_core::Store;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()
}

pub fn scope() -> MetricScope {
    MetricScope { project: "sys-perf".into(), configuration: "linux-3-node".into(), task: "crud".into() }
}

pub fn key(test: &str, measurement: &str) -> MetricKey {
    scope().key(test, measurement)
}

pub fn revision(order: i64) -> String {
    format!("rev{order:03}")
}

pub fn run_at(order: i64, rerun_index: u32) -> TestRun {
    TestRun {
        run_id: RunId(format!("run{order:03}-{rerun_index}")),
        scope: scope(),
        revision: revision(order),
        order,
        commit_date: t0() + Duration::hours(order),
        executed_at: t0() + Duration::hours(order) + Duration::minutes(10 + rerun_index as i64),
        suppressed: false,
        rerun_index,
    }
}

/// 60 revisions. `insert` throughput steps from 100 to 130 at order 30,
/// `update` is flat noise, `canary_cpu` steps at order 40.
pub fn populated_store() -> Store {
    let store = Store::in_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for order in 0..60 {
        let run = store.register_run(run_at(order, 0)).unwrap();
        let insert = if order >= 30 { 130.0 } else { 100.0 } + noise.sample(&mut rng);
        let update = 50.0 + noise.sample(&mut rng);
        let canary = if order >= 40 { 20.0 } else { 10.0 } + 0.1 * noise.sample(&mut rng);
        store
            .ingest_preaggregated(
                &run.run_id,
                vec![
                    (key("insert", "Throughput"), insert),
                    (key("update", "Throughput"), update),
                    (key("canary_cpu", "Throughput"), canary),
                ],
            )
            .unwrap();
    }
    store
}
