//! Statistics kernel.
//!
//! Descriptive statistics, linear-interpolation percentiles, the Student-t
//! distribution (via the regularized incomplete beta function), Welch's
//! t-test and the Mann-Whitney U-test. Everything here is a pure function.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("percentile {0} outside the open interval (0, 100)")]
    PercentileOutOfRange(f64),
    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("degrees of freedom must be positive and finite, got {0}")]
    InvalidDegreesOfFreedom(f64),
    #[error("need at least {needed} observations per sample, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("degenerate samples: both variances are zero and the means differ")]
    Degenerate,
}

/// Count, mean, unbiased variance and range of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (divisor n - 1); zero for a single observation.
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl SampleStats {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Result of a two-sample significance test. All p-values are two-sided.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// Summarizes a sample. The input is sorted before summation so the result
/// does not depend on input order.
pub fn describe(values: &[f64]) -> Result<SampleStats, StatsError> {
    let sorted = sorted_finite(values)?;
    Ok(describe_sorted(&sorted))
}

fn describe_sorted(sorted: &[f64]) -> SampleStats {
    let n = sorted.len();
    let min = sorted[0];
    let max = sorted[n - 1];
    if min == max {
        return SampleStats { n, mean: min, variance: 0.0, min, max };
    }
    let mean = (sorted.iter().sum::<f64>() / n as f64).clamp(min, max);
    let variance =
        if n < 2 { 0.0 } else { sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64 };
    SampleStats { n, mean, variance, min, max }
}

/// Percentile by linear interpolation between closest ranks
/// (`h = (n - 1) p / 100`, zero-based).
pub fn percentile(values: &[f64], p: f64) -> Result<f64, StatsError> {
    check_percentile(p)?;
    let sorted = sorted_finite(values)?;
    Ok(percentile_of_sorted(&sorted, p))
}

pub(crate) fn check_percentile(p: f64) -> Result<(), StatsError> {
    if p.is_nan() || p <= 0.0 || p >= 100.0 {
        return Err(StatsError::PercentileOutOfRange(p));
    }
    Ok(())
}

/// `sorted` must be non-empty, ascending and finite; `p` in (0, 100).
pub(crate) fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p / 100.0;
    let lo = (h.floor() as usize).min(n - 1);
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let (a, b) = (sorted[lo], sorted[lo + 1]);
    // Clamping keeps the estimate monotone across rank boundaries.
    (a + (h - lo as f64) * (b - a)).clamp(a, b)
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const CF_MAX_ITER: usize = 20_000;
const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`. Takes both `x` and `1 - x` so
/// callers can pass a complement computed without cancellation.
fn reg_inc_beta(x: f64, one_minus_x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * one_minus_x.ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(one_minus_x, b, a) / b
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
fn reg_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let gln = ln_gamma(a);
    if x < a + 1.0 {
        // Series for P(a, x).
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..CF_MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * CF_EPS {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - gln).exp()
    } else {
        // Continued fraction for Q(a, x).
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / CF_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=CF_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < CF_TINY {
                d = CF_TINY;
            }
            c = b + an / c;
            if c.abs() < CF_TINY {
                c = CF_TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < CF_EPS {
                break;
            }
        }
        (-x + a * x.ln() - gln).exp() * h
    }
}

/// Upper tail of the standard normal, `P(Z > z)`.
pub fn normal_sf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let half_erfc = |x: f64| 0.5 * reg_upper_gamma(0.5, x * x);
    if z >= 0.0 {
        half_erfc(z / std::f64::consts::SQRT_2)
    } else {
        1.0 - half_erfc(-z / std::f64::consts::SQRT_2)
    }
}

fn check_dof(dof: f64) -> Result<(), StatsError> {
    if !(dof.is_finite() && dof > 0.0) {
        return Err(StatsError::InvalidDegreesOfFreedom(dof));
    }
    Ok(())
}

/// `P(T > t)` for `t >= 0`.
fn t_upper_tail(t: f64, dof: f64) -> f64 {
    let t2 = t * t;
    let denom = dof + t2;
    0.5 * reg_inc_beta(dof / denom, t2 / denom, dof / 2.0, 0.5)
}

fn t_pdf(t: f64, dof: f64) -> f64 {
    let ln = ln_gamma((dof + 1.0) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * (dof * PI).ln()
        - (dof + 1.0) / 2.0 * (t * t / dof).ln_1p();
    ln.exp()
}

/// CDF of Student's t distribution.
pub fn t_cdf(t: f64, dof: f64) -> Result<f64, StatsError> {
    check_dof(dof)?;
    if t.is_nan() {
        return Err(StatsError::NonFinite);
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(if t >= 0.0 { 1.0 - t_upper_tail(t, dof) } else { t_upper_tail(-t, dof) })
}

/// Two-sided tail probability `P(|T| >= |t|)`.
pub fn t_two_sided_p(t: f64, dof: f64) -> Result<f64, StatsError> {
    check_dof(dof)?;
    if t.is_nan() {
        return Err(StatsError::NonFinite);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok((2.0 * t_upper_tail(t.abs(), dof)).min(1.0))
}

/// Inverse CDF of Student's t distribution.
///
/// Solves for the upper-tail probability `min(prob, 1 - prob)` with a
/// bracketed Newton iteration, so extreme quantiles keep relative accuracy.
pub fn t_quantile(prob: f64, dof: f64) -> Result<f64, StatsError> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(StatsError::ProbabilityOutOfRange(prob));
    }
    check_dof(dof)?;
    if prob == 0.5 {
        return Ok(0.0);
    }
    let tail = if prob > 0.5 { 1.0 - prob } else { prob };
    let sign = if prob > 0.5 { 1.0 } else { -1.0 };

    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while t_upper_tail(hi, dof) > tail {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Ok(sign * f64::MAX);
        }
    }

    let mut t = 0.5 * (lo + hi);
    for _ in 0..300 {
        let f = t_upper_tail(t, dof) - tail;
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let pdf = t_pdf(t, dof);
        let mut next = if pdf > 0.0 { t + f / pdf } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let converged = (next - t).abs() <= 1e-15 * next.abs().max(1e-300);
        t = next;
        if converged || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(sign * t)
}

// ---------------------------------------------------------------------------
// Two-sample tests
// ---------------------------------------------------------------------------

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
///
/// The statistic is `(a.mean - b.mean) / sqrt(a.var / a.n + b.var / b.n)`.
/// Two zero-variance samples with equal means give `t = 0, p = 1`; with
/// different means the test is undefined and [`StatsError::Degenerate`] is
/// returned.
pub fn welch_t_test(a: &SampleStats, b: &SampleStats) -> Result<TestResult, StatsError> {
    for s in [a, b] {
        if s.n < 2 {
            return Err(StatsError::TooFewObservations { needed: 2, got: s.n });
        }
    }
    let va = a.variance / a.n as f64;
    let vb = b.variance / b.n as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        if a.mean == b.mean {
            return Ok(TestResult { statistic: 0.0, degrees_of_freedom: None, p_value: 1.0 });
        }
        return Err(StatsError::Degenerate);
    }
    let t = (a.mean - b.mean) / se2.sqrt();
    let dof = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    let p_value = t_two_sided_p(t, dof)?;
    Ok(TestResult { statistic: t, degrees_of_freedom: Some(dof), p_value })
}

/// Samples at or below this size (both sides) use the exact permutation
/// distribution of U.
pub const MANN_WHITNEY_EXACT_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u_x: f64,
    pub u_y: f64,
    pub p_value: f64,
    pub exact: bool,
}

impl From<MannWhitney> for TestResult {
    fn from(mw: MannWhitney) -> Self {
        TestResult { statistic: mw.u_x, degrees_of_freedom: None, p_value: mw.p_value }
    }
}

/// Pooled midranks, doubled so they stay integral (`2 * rank`), in input
/// order: `x` first, then `y`. Also returns the tie-group sizes.
fn doubled_midranks(x: &[f64], y: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0_u64; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // 1-based positions start+1 ..= end; midrank = (start + 1 + end) / 2.
        let doubled = (start + 1 + end) as u64;
        for &idx in &order[start..end] {
            ranks[idx] = doubled;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Mann-Whitney U-test with midranks for ties.
///
/// `u_x` counts pairs with `x > y` (ties count one half). When both samples
/// have at most [`MANN_WHITNEY_EXACT_MAX_N`] observations the p-value comes
/// from the exact permutation distribution conditional on the observed ties;
/// otherwise the normal approximation with tie-corrected variance and a
/// continuity correction is used.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::Empty);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let (ranks, ties) = doubled_midranks(x, y);
    let rank_sum2: u64 = ranks[..nx].iter().sum();
    // 2 * U_x = 2 * R_x - nx (nx + 1)
    let u2_x = rank_sum2 - (nx * (nx + 1)) as u64;
    let u_x = u2_x as f64 / 2.0;
    let u_y = (nx * ny) as f64 - u_x;

    if ties.len() == 1 {
        return Ok(MannWhitney {
            u_x,
            u_y,
            p_value: 1.0,
            exact: nx <= MANN_WHITNEY_EXACT_MAX_N && ny <= MANN_WHITNEY_EXACT_MAX_N,
        });
    }

    if nx <= MANN_WHITNEY_EXACT_MAX_N && ny <= MANN_WHITNEY_EXACT_MAX_N {
        let p_value = exact_u_p_value(&ranks, nx, u2_x);
        return Ok(MannWhitney { u_x, u_y, p_value, exact: true });
    }

    let nf = n as f64;
    let mean = (nx * ny) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let variance = (nx * ny) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p_value = if variance <= 0.0 {
        1.0
    } else {
        let z = ((u_x - mean).abs() - 0.5).max(0.0) / variance.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(MannWhitney { u_x, u_y, p_value, exact: false })
}

/// Two-sided exact p-value: fraction of the `C(n, nx)` relabelings whose
/// doubled U is at least as far from its mean as the observed one. Counts
/// subsets by (size, doubled rank sum) with a knapsack-style table.
fn exact_u_p_value(doubled_ranks: &[u64], nx: usize, observed_u2: u64) -> f64 {
    let n = doubled_ranks.len();
    let ny = n - nx;
    let max_sum: usize = doubled_ranks.iter().sum::<u64>() as usize;
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0.0_f64; max_sum + 1]; nx + 1];
    ways[0][0] = 1.0;
    for &r in doubled_ranks {
        let r = r as usize;
        for k in (1..=nx).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let offset = (nx * (nx + 1)) as i64;
    let centre = (nx * ny) as i64;
    let observed_dev = (observed_u2 as i64 - centre).abs();
    let mut extreme = 0.0;
    let mut total = 0.0;
    for (s, &count) in ways[nx].iter().enumerate() {
        if count == 0.0 {
            continue;
        }
        total += count;
        let u2 = s as i64 - offset;
        if (u2 - centre).abs() >= observed_dev {
            extreme += count;
        }
    }
    (extreme / total).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn describe_examples() {
        let s = describe(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.variance), (2.0, 0.0));

        let s = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!(close(s.variance, 5.0 / 3.0, 1e-15));

        let s = describe(&[42.5]).unwrap();
        assert_eq!((s.n, s.variance, s.min, s.max), (1, 0.0, 42.5, 42.5));

        assert_eq!(describe(&[]), Err(StatsError::Empty));
        assert_eq!(describe(&[1.0, f64::NAN]), Err(StatsError::NonFinite));
    }

    #[test]
    fn constant_sample_has_exact_zero_variance() {
        let s = describe(&[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.mean, 0.1);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.5);
        assert_eq!(percentile(&[7.0], 1.0).unwrap(), 7.0);
        assert_eq!(percentile(&[7.0], 99.0).unwrap(), 7.0);
        let v: Vec<f64> = (1..=10_000).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 5000.5);
        assert!(matches!(percentile(&v, 0.0), Err(StatsError::PercentileOutOfRange(_))));
        assert!(matches!(percentile(&v, 100.0), Err(StatsError::PercentileOutOfRange(_))));
        assert!(matches!(percentile(&[], 50.0), Err(StatsError::Empty)));
    }

    #[test]
    fn t_quantile_examples() {
        for dof in [1.0, 2.5, 30.0, 1000.0] {
            assert_eq!(t_quantile(0.5, dof).unwrap(), 0.0);
        }
        let closed = (PI * (0.975 - 0.5)).tan();
        assert!(close(t_quantile(0.975, 1.0).unwrap(), closed, 1e-10));
        // dof = 2 closed form: t = (2p - 1) / sqrt(2 p (1 - p))
        let p: f64 = 0.9;
        let closed2 = (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
        assert!(close(t_quantile(p, 2.0).unwrap(), closed2, 1e-10));
        assert!(t_quantile(0.0, 3.0).is_err());
        assert!(t_quantile(1.0, 3.0).is_err());
        assert!(t_quantile(0.3, 0.0).is_err());
        assert!(t_quantile(0.3, f64::INFINITY).is_err());
    }

    #[test]
    fn t_cdf_inverts_quantile() {
        for dof in [1.0, 3.0, 17.0, 250.0] {
            for p in [0.001, 0.025, 0.3, 0.7, 0.975, 0.99975] {
                let q = t_quantile(p, dof).unwrap();
                assert!(close(t_cdf(q, dof).unwrap(), p, 1e-12), "dof {dof} p {p}");
            }
        }
    }

    #[test]
    fn normal_sf_reference_points() {
        assert!(close(normal_sf(0.0), 0.5, 1e-15));
        assert!(close(normal_sf(1.959963984540054), 0.025, 1e-12));
        assert!(close(normal_sf(-1.959963984540054), 0.975, 1e-12));
    }

    #[test]
    fn welch_examples() {
        let a = SampleStats { n: 16, mean: 10.0, variance: 4.0, min: 0.0, max: 20.0 };
        let b = SampleStats { n: 16, mean: 12.0, variance: 4.0, min: 0.0, max: 20.0 };
        let r = welch_t_test(&a, &b).unwrap();
        assert!(close(r.statistic, -2.0 * 2f64.sqrt(), 1e-14));
        assert!(close(r.degrees_of_freedom.unwrap(), 30.0, 1e-12));
        let swapped = welch_t_test(&b, &a).unwrap();
        assert_eq!(swapped.statistic, -r.statistic);
        assert_eq!(swapped.p_value, r.p_value);

        let same = welch_t_test(&a, &a).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
    }

    #[test]
    fn welch_degenerate_cases() {
        let flat = |mean| SampleStats { n: 5, mean, variance: 0.0, min: mean, max: mean };
        let r = welch_t_test(&flat(3.0), &flat(3.0)).unwrap();
        assert_eq!((r.statistic, r.p_value, r.degrees_of_freedom), (0.0, 1.0, None));
        assert_eq!(welch_t_test(&flat(3.0), &flat(4.0)), Err(StatsError::Degenerate));
        let one = SampleStats { n: 1, mean: 1.0, variance: 0.0, min: 1.0, max: 1.0 };
        assert!(matches!(welch_t_test(&one, &flat(1.0)), Err(StatsError::TooFewObservations { .. })));
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u_x, 0.0);
        assert_eq!(r.u_y, 9.0);
        // Complete separation with 3 vs 3: 2 of 20 labelings are as extreme.
        assert!(close(r.p_value, 0.1, 1e-15));

        let v = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = mann_whitney_u(&v, &v).unwrap();
        assert_eq!(r.u_x, 12.5);

        let r = mann_whitney_u(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 1.0);

        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn mann_whitney_large_uses_normal_approximation() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = (10..30).map(f64::from).collect();
        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(!r.exact);
        assert_eq!(r.u_x + r.u_y, 400.0);
        assert!(r.p_value > 0.0 && r.p_value < 0.01);
    }
}
