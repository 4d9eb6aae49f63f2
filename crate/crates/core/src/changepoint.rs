//! E-Divisive change point detection and stable-region extraction.
//!
//! Detection is hierarchical: every current segment proposes its best split
//! (the `tau` maximizing the energy divergence `Q̂`), the strongest proposal
//! is checked with a seeded permutation test, and the search stops at the
//! first proposal that is not significant.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MetricKey, Series};
use crate::stats::{self, SampleStats};

/// Relative tolerance under which two divergence values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdParams {
    /// Distance exponent in (0, 2].
    pub alpha_exponent: f64,
    pub significance: f64,
    pub permutations: usize,
    pub min_segment: usize,
    pub rng_seed: u64,
}

impl Default for CpdParams {
    fn default() -> Self {
        CpdParams { alpha_exponent: 1.0, significance: 0.05, permutations: 200, min_segment: 5, rng_seed: 0 }
    }
}

impl CpdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_exponent > 0.0 && self.alpha_exponent <= 2.0) {
            return Err(Error::Validation(format!("alpha_exponent must be in (0, 2], got {}", self.alpha_exponent)));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Validation(format!("significance must be in (0, 1), got {}", self.significance)));
        }
        if self.permutations == 0 {
            return Err(Error::Validation("permutations must be positive".into()));
        }
        if self.min_segment < 2 {
            return Err(Error::Validation("min_segment must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriageState {
    Untriaged,
    Acknowledged,
    Hidden,
    Ticketed,
}

impl std::fmt::Display for TriageState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TriageState::Untriaged => "UNTRIAGED",
            TriageState::Acknowledged => "ACKNOWLEDGED",
            TriageState::Hidden => "HIDDEN",
            TriageState::Ticketed => "TICKETED",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TriageState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "UNTRIAGED" => Ok(TriageState::Untriaged),
            "ACKNOWLEDGED" => Ok(TriageState::Acknowledged),
            "HIDDEN" => Ok(TriageState::Hidden),
            "TICKETED" => Ok(TriageState::Ticketed),
            _ => Err(Error::Validation(format!("unknown triage state {s:?}"))),
        }
    }
}

/// A maximal run of points modeled with a constant mean. `start` and `end`
/// are commit orders, half-open; the last region ends one past the newest
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableRegion {
    pub key: MetricKey,
    pub start: i64,
    pub end: i64,
    pub stats: SampleStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    /// `<key>@<order_index>`; stable across re-detection.
    pub id: String,
    pub key: MetricKey,
    /// Commit order of the first point of the new regime.
    pub order_index: i64,
    pub revision: String,
    pub commit_date: DateTime<Utc>,
    pub calculated_on: DateTime<Utc>,
    pub qhat: f64,
    pub p_value: f64,
    pub before: StableRegion,
    pub after: StableRegion,
    pub triage_state: TriageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket_id: Option<String>,
    #[serde(default)]
    pub is_canary: bool,
    /// Bumped on every triage transition; used for optimistic concurrency.
    #[serde(default)]
    pub version: u64,
}

pub fn change_point_id(key: &MetricKey, order_index: i64) -> String {
    format!("{key}@{order_index}")
}

/// A split found by [`detect_positions`], in series positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub position: usize,
    pub qhat: f64,
    pub p_value: f64,
}

/// Pairwise `|x_i - x_j|^alpha`, row-major.
struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    fn new(values: &[f64], alpha: f64) -> Self {
        let n = values.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (values[i] - values[j]).abs();
                let v = if alpha == 1.0 { diff } else { diff.powf(alpha) };
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        DistanceMatrix { n, d }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

fn q_from_sums(cross: f64, within_x: f64, within_y: f64, m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let divergence = 2.0 * cross / (mf * nf) - within_x / (mf * (mf - 1.0) / 2.0) - within_y / (nf * (nf - 1.0) / 2.0);
    mf * nf / (mf + nf) * divergence
}

/// Divergence `Q̂(tau)` for splitting `values` into the first `tau` values
/// and the rest.
pub fn qhat(values: &[f64], tau: usize, params: &CpdParams) -> Result<f64> {
    params.validate()?;
    let n = values.len();
    if tau < params.min_segment || tau + params.min_segment > n {
        return Err(Error::Validation(format!(
            "tau {tau} outside [{}, {}] for a series of length {n}",
            params.min_segment,
            n.saturating_sub(params.min_segment)
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats(stats::StatsError::NonFinite));
    }
    let dist = DistanceMatrix::new(values, params.alpha_exponent);
    let (mut cross, mut within_x, mut within_y) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist.get(i, j);
            match (i < tau, j < tau) {
                (true, true) => within_x += v,
                (false, false) => within_y += v,
                _ => cross += v,
            }
        }
    }
    Ok(q_from_sums(cross, within_x, within_y, tau, n - tau))
}

/// Best split of the points `idx` (indices into `dist`). Returns the offset
/// within `idx` and the divergence; ties go to the smallest offset.
fn best_split(dist: &DistanceMatrix, idx: &[usize], min_segment: usize) -> Option<(usize, f64)> {
    let n = idx.len();
    if n < 2 * min_segment {
        return None;
    }
    let mut within_y = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            within_y += dist.get(idx[i], idx[j]);
        }
    }
    let mut cross = 0.0;
    let mut within_x = 0.0;
    let mut scores = Vec::with_capacity(n);
    for t in 0..(n - min_segment) {
        // Move point t from the right part to the left part.
        let mut to_left = 0.0;
        for i in 0..t {
            to_left += dist.get(idx[t], idx[i]);
        }
        let mut to_right = 0.0;
        for j in (t + 1)..n {
            to_right += dist.get(idx[t], idx[j]);
        }
        cross += to_right - to_left;
        within_x += to_left;
        within_y -= to_right;
        let tau = t + 1;
        if tau >= min_segment {
            scores.push((tau, q_from_sums(cross, within_x, within_y, tau, n - tau)));
        }
    }
    let max = scores.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - TIE_TOLERANCE * max.abs();
    scores.into_iter().find(|&(_, q)| q >= threshold)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Permutation RNG for one detection round.
fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(round as u64)))
}

/// Strongest split over all segments between consecutive `boundaries`, as
/// (segment start, segment end, offset, divergence). Earliest wins ties.
fn strongest_split(dist: &DistanceMatrix, segments: &[Vec<usize>], min_segment: usize) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (s, idx) in segments.iter().enumerate() {
        if let Some((offset, q)) = best_split(dist, idx, min_segment) {
            let better = match best {
                None => true,
                Some((_, _, bq)) => q > bq + TIE_TOLERANCE * bq.abs(),
            };
            if better {
                best = Some((s, offset, q));
            }
        }
    }
    best
}

/// Add-one permutation p-value of the strongest split. Each shuffle
/// permutes the points within every segment independently and takes the
/// strongest split over all of them.
fn permutation_p_value(
    dist: &DistanceMatrix,
    segments: &[Vec<usize>],
    observed: f64,
    round: usize,
    params: &CpdParams,
) -> f64 {
    let mut rng = round_rng(params.rng_seed, round);
    let mut shuffled = segments.to_vec();
    let threshold = observed - TIE_TOLERANCE * observed.abs();
    let mut at_least = 0usize;
    for _ in 0..params.permutations {
        for idx in &mut shuffled {
            idx.shuffle(&mut rng);
        }
        if let Some((_, _, q)) = strongest_split(dist, &shuffled, params.min_segment) {
            if q >= threshold {
                at_least += 1;
            }
        }
    }
    (at_least + 1) as f64 / (params.permutations + 1) as f64
}

/// Hierarchical E-Divisive over raw values. Returns accepted splits sorted
/// by position.
pub fn detect_positions(values: &[f64], params: &CpdParams) -> Result<Vec<Detection>> {
    params.validate()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats(stats::StatsError::NonFinite));
    }
    if values.len() < 2 * params.min_segment {
        return Ok(Vec::new());
    }
    let dist = DistanceMatrix::new(values, params.alpha_exponent);
    let mut boundaries = vec![0, values.len()];
    let mut found = Vec::new();
    for round in 0.. {
        let segments: Vec<Vec<usize>> = boundaries.windows(2).map(|w| (w[0]..w[1]).collect()).collect();
        let Some((s, offset, q)) = strongest_split(&dist, &segments, params.min_segment) else {
            break;
        };
        let p_value = permutation_p_value(&dist, &segments, q, round, params);
        if p_value >= params.significance {
            break;
        }
        let position = boundaries[s] + offset;
        found.push(Detection { position, qhat: q, p_value });
        boundaries.insert(s + 1, position);
    }
    found.sort_by_key(|d| d.position);
    Ok(found)
}

fn regions_at_positions(series: &Series, positions: &[usize]) -> Result<Vec<StableRegion>> {
    let n = series.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cuts = Vec::with_capacity(positions.len() + 2);
    cuts.push(0);
    for &p in positions {
        if p == 0 || p >= n || p <= cuts[cuts.len() - 1] {
            return Err(Error::Validation(format!(
                "change point positions must be strictly increasing within (0, {n})"
            )));
        }
        cuts.push(p);
    }
    cuts.push(n);
    let values = series.values();
    let end_order = |pos: usize| {
        if pos == n {
            series.points[n - 1].order + 1
        } else {
            series.points[pos].order
        }
    };
    cuts.windows(2)
        .map(|w| {
            Ok(StableRegion {
                key: series.key.clone(),
                start: series.points[w[0]].order,
                end: end_order(w[1]),
                stats: stats::describe(&values[w[0]..w[1]])?,
            })
        })
        .collect()
}

fn positions_of(series: &Series, cps: &[ChangePoint]) -> Result<Vec<usize>> {
    let mut positions = Vec::with_capacity(cps.len());
    for cp in cps {
        let pos = series
            .points
            .iter()
            .position(|p| p.order == cp.order_index)
            .ok_or_else(|| Error::Validation(format!("change point order {} not in series", cp.order_index)))?;
        if let Some(&last) = positions.last() {
            if pos <= last {
                return Err(Error::Validation("change points must be sorted without duplicates".into()));
            }
        }
        positions.push(pos);
    }
    Ok(positions)
}

/// Partition of the series at the given change points; `k` change points
/// give `k + 1` regions.
pub fn stable_regions(series: &Series, cps: &[ChangePoint]) -> Result<Vec<StableRegion>> {
    regions_at_positions(series, &positions_of(series, cps)?)
}

/// The region containing `revision`: after the latest change point at or
/// before it and before the next one.
pub fn region_containing(series: &Series, cps: &[ChangePoint], revision: &str) -> Result<StableRegion> {
    let pos = series
        .position_of_revision(revision)
        .ok_or_else(|| Error::NotFound(format!("revision {revision} in {}", series.key)))?;
    let order = series.points[pos].order;
    let regions = stable_regions(series, cps)?;
    regions
        .into_iter()
        .find(|r| r.start <= order && order < r.end)
        .ok_or_else(|| Error::Internal(format!("no region contains order {order}")))
}

/// Builds change points from detections at the given positions.
pub fn change_points_at(
    series: &Series,
    detections: &[Detection],
    calculated_on: DateTime<Utc>,
) -> Result<Vec<ChangePoint>> {
    let positions: Vec<usize> = detections.iter().map(|d| d.position).collect();
    let regions = regions_at_positions(series, &positions)?;
    let newest = series.points.iter().map(|p| p.commit_date).max();
    let calculated_on = newest.map_or(calculated_on, |d| calculated_on.max(d));
    Ok(detections
        .iter()
        .enumerate()
        .map(|(i, det)| {
            let point = &series.points[det.position];
            ChangePoint {
                id: change_point_id(&series.key, point.order),
                key: series.key.clone(),
                order_index: point.order,
                revision: point.revision.clone(),
                commit_date: point.commit_date,
                calculated_on,
                qhat: det.qhat,
                p_value: det.p_value,
                before: regions[i].clone(),
                after: regions[i + 1].clone(),
                triage_state: TriageState::Untriaged,
                ticket_id: None,
                is_canary: false,
                version: 0,
            }
        })
        .collect())
}

/// Runs E-Divisive on a series and returns its change points, sorted.
pub fn detect(series: &Series, params: &CpdParams, calculated_on: DateTime<Utc>) -> Result<Vec<ChangePoint>> {
    let detections = detect_positions(&series.values(), params)?;
    change_points_at(series, &detections, calculated_on)
}
