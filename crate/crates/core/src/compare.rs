//! Revision comparison over stable-region statistics, with filtering,
//! sorting and CSV export.

use std::cmp::Ordering;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::changepoint::{self, StableRegion};
use crate::error::{Error, Result};
use crate::model::{MetricKey, Series};
use crate::stats::{self, SampleStats, TestResult};
use crate::store::{KeyFilter, Store};

pub const DEFAULT_MIN_DEVIATION: f64 = 2.0;

pub const CSV_HEADER: [&str; 12] = [
    "configuration",
    "task",
    "test",
    "measurement",
    "base_mean",
    "cand_mean",
    "ratio",
    "percent_change",
    "deviation",
    "zero_variance",
    "welch_p",
    "mw_p",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub key: MetricKey,
    pub base: SampleStats,
    pub cand: SampleStats,
    /// `cand.mean / base.mean`; undefined when the base mean is zero.
    pub ratio: Option<f64>,
    pub percent_change: Option<f64>,
    /// Change in means in base standard deviations. Undefined when the base
    /// variance is zero and the means differ.
    pub deviation: Option<f64>,
    pub zero_variance: bool,
    pub zero_mean: bool,
    pub welch: Option<TestResult>,
    pub mann_whitney_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedKey {
    pub key: MetricKey,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub base_revision: String,
    pub cand_revision: String,
    pub rows: Vec<ComparisonRow>,
    pub skipped: Vec<SkippedKey>,
    /// Set once [`filter_and_sort`] has been applied.
    pub min_deviation_filter: Option<f64>,
    pub generated_at: DateTime<Utc>,
}

/// Builds a row from two regions. With the raw region values, Welch and
/// Mann-Whitney results are attached when both sides have at least two
/// points.
pub fn build_row(
    key: &MetricKey,
    base_region: &StableRegion,
    cand_region: &StableRegion,
    samples: Option<(&[f64], &[f64])>,
) -> ComparisonRow {
    let base = base_region.stats;
    let cand = cand_region.stats;
    let zero_mean = base.mean == 0.0;
    let ratio = (!zero_mean).then(|| cand.mean / base.mean);
    let percent_change = ratio.map(|r| (r - 1.0) * 100.0);
    let zero_variance = base.variance == 0.0;
    let deviation = if !zero_variance {
        Some((cand.mean - base.mean) / base.variance.sqrt())
    } else if cand.mean == base.mean {
        Some(0.0)
    } else {
        None
    };
    let (welch, mann_whitney_p) = match samples {
        Some((b, c)) if b.len() >= 2 && c.len() >= 2 => {
            (stats::welch_t_test(&base, &cand).ok(), stats::mann_whitney_u(b, c).ok().map(|mw| mw.p_value))
        }
        _ => (None, None),
    };
    ComparisonRow {
        key: key.clone(),
        base,
        cand,
        ratio,
        percent_change,
        deviation,
        zero_variance,
        zero_mean,
        welch,
        mann_whitney_p,
    }
}

fn region_values(series: &Series, region: &StableRegion) -> Vec<f64> {
    series.points.iter().filter(|p| region.start <= p.order && p.order < region.end).map(|p| p.value).collect()
}

impl Store {
    /// One row per matched key present at both revisions, unsorted and
    /// unfiltered. Keys present at only one side are listed as skipped.
    pub fn compare_revisions(
        &self,
        base_revision: &str,
        cand_revision: &str,
        filter: &KeyFilter,
    ) -> Result<ComparisonReport> {
        let state = self.read();
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        for key in state.matching_keys(filter)? {
            let series = state.series(&key, false)?;
            let missing: Vec<String> = [base_revision, cand_revision]
                .into_iter()
                .filter(|r| series.position_of_revision(r).is_none())
                .map(str::to_string)
                .collect();
            if !missing.is_empty() {
                skipped.push(SkippedKey { key, missing });
                continue;
            }
            let cps = state.change_points(&key);
            let base = changepoint::region_containing(&series, cps, base_revision)?;
            let cand = changepoint::region_containing(&series, cps, cand_revision)?;
            let b = region_values(&series, &base);
            let c = region_values(&series, &cand);
            rows.push(build_row(&key, &base, &cand, Some((&b, &c))));
        }
        if rows.is_empty() {
            return Err(Error::NotFound(format!("no metric has results at both {base_revision} and {cand_revision}")));
        }
        Ok(ComparisonReport {
            base_revision: base_revision.to_string(),
            cand_revision: cand_revision.to_string(),
            rows,
            skipped,
            min_deviation_filter: None,
            generated_at: self.now(),
        })
    }
}

fn keeps(row: &ComparisonRow, min_deviation: f64) -> bool {
    match row.deviation {
        Some(d) => d.abs() >= min_deviation,
        None => row.zero_variance,
    }
}

fn by_magnitude(a: &ComparisonRow, b: &ComparisonRow) -> Ordering {
    match (a.percent_change, b.percent_change) {
        (Some(x), Some(y)) => y.abs().total_cmp(&x.abs()),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.key.cmp(&b.key))
}

/// Drops rows whose deviation is below `min_deviation` (rows with an
/// undefined deviation on zero base variance are kept) and sorts by
/// absolute percent change, largest first, then by key. Rows with an
/// undefined percent change go last.
pub fn filter_and_sort(mut report: ComparisonReport, min_deviation: f64) -> Result<ComparisonReport> {
    if !(min_deviation.is_finite() && min_deviation >= 0.0) {
        return Err(Error::Validation(format!("min_deviation must be a non-negative number, got {min_deviation}")));
    }
    report.rows.retain(|r| keeps(r, min_deviation));
    report.rows.sort_by(by_magnitude);
    report.min_deviation_filter = Some(min_deviation);
    Ok(report)
}

fn real(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Serializes the report rows in order. Undefined values are empty fields.
pub fn export_csv(report: &ComparisonReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in &report.rows {
        w.write_record([
            r.key.configuration.clone(),
            r.key.task.clone(),
            r.key.test.clone(),
            r.key.measurement.clone(),
            r.base.mean.to_string(),
            r.cand.mean.to_string(),
            real(r.ratio),
            real(r.percent_change),
            real(r.deviation),
            r.zero_variance.to_string(),
            real(r.welch.map(|w| w.p_value)),
            real(r.mann_whitney_p),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One parsed CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub configuration: String,
    pub task: String,
    pub test: String,
    pub measurement: String,
    pub base_mean: f64,
    pub cand_mean: f64,
    pub ratio: Option<f64>,
    pub percent_change: Option<f64>,
    pub deviation: Option<f64>,
    pub zero_variance: bool,
    pub welch_p: Option<f64>,
    pub mw_p: Option<f64>,
}

impl From<&ComparisonRow> for CsvRow {
    fn from(r: &ComparisonRow) -> Self {
        CsvRow {
            configuration: r.key.configuration.clone(),
            task: r.key.task.clone(),
            test: r.key.test.clone(),
            measurement: r.key.measurement.clone(),
            base_mean: r.base.mean,
            cand_mean: r.cand.mean,
            ratio: r.ratio,
            percent_change: r.percent_change,
            deviation: r.deviation,
            zero_variance: r.zero_variance,
            welch_p: r.welch.map(|w| w.p_value),
            mw_p: r.mann_whitney_p,
        }
    }
}

/// Parses output of [`export_csv`]; the header must match exactly.
pub fn parse_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Validation(format!("csv header: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Validation("unexpected csv header".into()));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Validation(format!("csv row {}: {e}", i + 2))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(test: &str) -> MetricKey {
        MetricKey::new("p", "c", "t", test, "Throughput").unwrap()
    }

    fn region(mean: f64, variance: f64, n: usize) -> StableRegion {
        StableRegion {
            key: key("x"),
            start: 0,
            end: n as i64,
            stats: SampleStats { n, mean, variance, min: mean, max: mean },
        }
    }

    fn row(test: &str, base: (f64, f64), cand_mean: f64) -> ComparisonRow {
        build_row(&key(test), &region(base.0, base.1, 10), &region(cand_mean, 1.0, 10), None)
    }

    fn report(rows: Vec<ComparisonRow>) -> ComparisonReport {
        ComparisonReport {
            base_revision: "a".into(),
            cand_revision: "b".into(),
            rows,
            skipped: Vec::new(),
            min_deviation_filter: None,
            generated_at: Utc::now(),
        }
    }

    #[test]
    fn row_metrics() {
        let r = row("x", (100.0, 25.0), 350.0);
        assert_eq!(r.ratio, Some(3.5));
        assert_eq!(r.percent_change, Some(250.0));
        assert_eq!(r.deviation, Some(50.0));
        assert!(!r.zero_variance && !r.zero_mean);

        let r = row("x", (100.0, 25.0), 100.0);
        assert_eq!((r.ratio, r.percent_change, r.deviation), (Some(1.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn degenerate_rows() {
        let r = row("x", (100.0, 0.0), 120.0);
        assert!(r.zero_variance);
        assert_eq!(r.deviation, None);
        assert_eq!(r.ratio, Some(1.2));

        let r = row("x", (100.0, 0.0), 100.0);
        assert_eq!(r.deviation, Some(0.0));

        let r = row("x", (0.0, 4.0), 2.0);
        assert!(r.zero_mean);
        assert_eq!((r.ratio, r.percent_change), (None, None));
        assert_eq!(r.deviation, Some(1.0));
    }

    #[test]
    fn filter_threshold_and_sort() {
        let rows = vec![row("a", (100.0, 1.0), 101.5), row("b", (100.0, 1.0), 102.0), row("c", (100.0, 1.0), 103.0)];
        let out = filter_and_sort(report(rows), 2.0).unwrap();
        let tests: Vec<_> = out.rows.iter().map(|r| r.key.test.as_str()).collect();
        assert_eq!(tests, ["c", "b"]);

        let rows = vec![row("a", (100.0, 1.0), 105.0), row("b", (100.0, 1.0), 60.0), row("c", (100.0, 1.0), 350.0)];
        let out = filter_and_sort(report(rows), 0.0).unwrap();
        let pcs: Vec<_> = out.rows.iter().map(|r| r.percent_change.unwrap().round()).collect();
        assert_eq!(pcs, [250.0, -40.0, 5.0]);
    }

    #[test]
    fn undefined_rows_sort_last_and_zero_variance_kept() {
        let rows = vec![row("z", (0.0, 1.0), 50.0), row("a", (100.0, 1.0), 103.0), row("m", (100.0, 0.0), 100.5)];
        let out = filter_and_sort(report(rows), 2.0).unwrap();
        let tests: Vec<_> = out.rows.iter().map(|r| r.key.test.as_str()).collect();
        assert_eq!(tests, ["a", "m", "z"]);
        assert!(filter_and_sort(report(Vec::new()), -1.0).is_err());
    }

    #[test]
    fn csv_header_and_empty_fields() {
        assert_eq!(
            export_csv(&report(Vec::new())),
            b"configuration,task,test,measurement,base_mean,cand_mean,ratio,percent_change,deviation,zero_variance,welch_p,mw_p\n"
        );
        let bytes = export_csv(&report(vec![row("x", (0.0, 1.0), 2.0)]));
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "c,t,x,Throughput,0,2,,,2,false,,");
        let parsed = parse_csv(&bytes).unwrap();
        assert_eq!(parsed[0].ratio, None);
        assert_eq!(parsed[0].deviation, Some(2.0));
    }

    #[test]
    fn csv_quotes_fields() {
        let k = MetricKey::new("p", "c,1", "t", "say \"hi\"", "Throughput").unwrap();
        let r = build_row(&k, &region(1.0, 1.0, 3), &region(2.0, 1.0, 3), None);
        let bytes = export_csv(&report(vec![r]));
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"c,1\",t,\"say \"\"hi\"\"\""));
        assert_eq!(parse_csv(&bytes).unwrap()[0].test, "say \"hi\"");
    }
}
