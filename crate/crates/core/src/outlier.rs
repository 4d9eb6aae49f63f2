//! Generalized ESD (Rosner) outlier test over the most recent points of a
//! series.

use serde::{Deserialize, Serialize};

use crate::changepoint::ChangePoint;
use crate::error::{Error, Result};
use crate::model::Series;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GesdParams {
    /// Upper bound `r` on the number of outliers.
    pub max_outliers: usize,
    pub significance: f64,
    /// Number of most recent points analyzed.
    pub window: usize,
}

impl Default for GesdParams {
    fn default() -> Self {
        GesdParams { max_outliers: 10, significance: 0.05, window: 100 }
    }
}

impl GesdParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_outliers == 0 {
            return Err(Error::Validation("max_outliers must be positive".into()));
        }
        if self.max_outliers >= self.window {
            return Err(Error::Validation(format!(
                "max_outliers ({}) must be smaller than window ({})",
                self.max_outliers, self.window
            )));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Validation(format!("significance must be in (0, 1), got {}", self.significance)));
        }
        Ok(())
    }
}

/// One step of the sequential deletion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GesdStep {
    pub candidate_index: usize,
    /// Extreme studentized deviate `R_i`.
    pub statistic: f64,
    /// Critical value `λ_i`.
    pub critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Positions in the analyzed input, in deletion order.
    pub indices: Vec<usize>,
    pub trail: Vec<GesdStep>,
    pub count: usize,
}

impl OutlierReport {
    fn empty() -> Self {
        OutlierReport { indices: Vec::new(), trail: Vec::new(), count: 0 }
    }
}

/// Critical value `λ_i` for step `i` (1-based) over `n` points.
pub fn gesd_critical_value(n: usize, i: usize, significance: f64) -> Result<f64> {
    let remaining = (n - i + 1) as f64;
    let dof = (n - i - 1) as f64;
    let p = 1.0 - significance / (2.0 * remaining);
    let t = stats::t_quantile(p, dof)?;
    Ok((n - i) as f64 * t / ((dof + t * t) * remaining).sqrt())
}

/// Runs GESD on the last `params.window` values. Reported indices are
/// positions in `values`.
///
/// The number of steps is `min(r, n - 2)` so every critical value has at
/// least one degree of freedom. A window with zero variance short-circuits
/// to an empty report.
pub fn gesd(values: &[f64], params: &GesdParams) -> Result<OutlierReport> {
    params.validate()?;
    if params.window > values.len() {
        return Err(Error::Validation(format!("window {} exceeds series length {}", params.window, values.len())));
    }
    let offset = values.len() - params.window;
    let window = &values[offset..];
    let n = window.len();
    if stats::describe(window)?.variance == 0.0 {
        return Ok(OutlierReport::empty());
    }

    let steps = params.max_outliers.min(n.saturating_sub(2));
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut trail = Vec::with_capacity(steps);
    for i in 1..=steps {
        let sample: Vec<f64> = remaining.iter().map(|&j| window[j]).collect();
        let summary = stats::describe(&sample)?;
        let sd = summary.std_dev();
        let mut best = 0;
        let mut best_dev = f64::NEG_INFINITY;
        for (slot, &x) in sample.iter().enumerate() {
            let dev = (x - summary.mean).abs();
            if dev > best_dev {
                best_dev = dev;
                best = slot;
            }
        }
        let statistic = if sd > 0.0 { best_dev / sd } else { 0.0 };
        let critical = gesd_critical_value(n, i, params.significance)?;
        trail.push(GesdStep { candidate_index: offset + remaining[best], statistic, critical });
        remaining.remove(best);
    }
    let count = trail.iter().rposition(|s| s.statistic > s.critical).map_or(0, |last| last + 1);
    let indices = trail[..count].iter().map(|s| s.candidate_index).collect();
    Ok(OutlierReport { indices, trail, count })
}

/// Outcome of checking the newest point of a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatestPointCheck {
    pub report: OutlierReport,
    pub is_outlier: bool,
    /// Series position where the analyzed window starts.
    pub window_start: usize,
}

/// GESD over the newest `window` points, restricted to the region after the
/// most recent change point inside that window. `None` when there is not
/// enough history.
pub fn check_latest_point(
    series: &Series,
    change_points: &[ChangePoint],
    params: &GesdParams,
) -> Result<Option<LatestPointCheck>> {
    params.validate()?;
    let len = series.len();
    if len < params.window {
        return Ok(None);
    }
    let mut start = len - params.window;
    let first_order = series.points[start].order;
    if let Some(cp) = change_points.iter().filter(|cp| cp.order_index > first_order).max_by_key(|cp| cp.order_index) {
        if let Some(pos) = series.points.iter().position(|p| p.order >= cp.order_index) {
            start = start.max(pos);
        }
    }
    let available = len - start;
    if available < params.max_outliers + 2 {
        return Ok(None);
    }
    let values = series.values();
    let effective = GesdParams { window: available, ..params.clone() };
    let report = gesd(&values, &effective)?;
    let is_outlier = report.indices.contains(&(len - 1));
    Ok(Some(LatestPointCheck { report, is_outlier, window_start: start }))
}

/// True iff the newest point is flagged by GESD over the last window. Short
/// series are never flagged.
pub fn latest_point_is_outlier(series: &Series, params: &GesdParams) -> Result<bool> {
    Ok(check_latest_point(series, &[], params)?.is_some_and(|c| c.is_outlier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MetricKey, RunId, SeriesPoint};
    use chrono::Utc;

    fn series(values: &[f64]) -> Series {
        Series {
            key: MetricKey::new("p", "c", "t", "canary_cpu", "Throughput").unwrap(),
            points: values
                .iter()
                .enumerate()
                .map(|(i, &value)| SeriesPoint {
                    order: i as i64,
                    revision: format!("r{i}"),
                    commit_date: Utc::now(),
                    value,
                    run_id: RunId(format!("run{i}")),
                    suppressed: false,
                })
                .collect(),
        }
    }

    fn wiggle(n: usize) -> Vec<f64> {
        (0..n).map(|i| 100.0 + ((i * 37) % 11) as f64 * 0.1).collect()
    }

    #[test]
    fn single_spike_flagged() {
        let mut v = vec![1.0; 9];
        v.push(100.0);
        let params = GesdParams { max_outliers: 3, significance: 0.05, window: 10 };
        let report = gesd(&v, &params).unwrap();
        assert_eq!(report.count, 1);
        assert_eq!(report.indices, vec![9]);
        assert_eq!(report.trail.len(), 3);
        assert!(report.trail.iter().all(|s| s.critical > 0.0));
    }

    #[test]
    fn constant_window_short_circuits() {
        let params = GesdParams { max_outliers: 3, significance: 0.05, window: 10 };
        let report = gesd(&[4.0; 10], &params).unwrap();
        assert_eq!(report, OutlierReport::empty());
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let params = GesdParams { max_outliers: 3, significance: 0.05, window: 10 };
        assert!(gesd(&[1.0, 2.0], &params).is_err());
        let bad = GesdParams { max_outliers: 10, significance: 0.05, window: 10 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn latest_point_checks() {
        let params = GesdParams { max_outliers: 3, significance: 0.05, window: 30 };
        let mut v = wiggle(40);
        *v.last_mut().unwrap() = 1000.0;
        assert!(latest_point_is_outlier(&series(&v), &params).unwrap());

        assert!(!latest_point_is_outlier(&series(&[5.0; 40]), &params).unwrap());

        let mut v = wiggle(40);
        v[30] = 1000.0;
        assert!(!latest_point_is_outlier(&series(&v), &params).unwrap());

        assert!(!latest_point_is_outlier(&series(&wiggle(10)), &params).unwrap());
    }

    #[test]
    fn window_restarts_after_change_point() {
        // Step up at 20: without the change point the new level looks like a
        // run of outliers; with it the latest point is ordinary.
        let mut v = wiggle(20);
        v.extend(wiggle(20).iter().map(|x| x + 50.0));
        let s = series(&v);
        let params = GesdParams { max_outliers: 3, significance: 0.05, window: 40 };
        let cp = crate::changepoint::change_points_at(
            &s,
            &[crate::changepoint::Detection { position: 20, qhat: 1.0, p_value: 0.0 }],
            Utc::now(),
        )
        .unwrap();
        let check = check_latest_point(&s, &cp, &params).unwrap().unwrap();
        assert_eq!(check.window_start, 20);
        assert!(!check.is_outlier);
    }
}
