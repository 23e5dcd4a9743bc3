//! The five data statistics and the phi approximation interval.
//!
//! A candidate `(log r, sigma)` is compared to data through its surrogate
//! entry: the reference sample `round(phi * exp(f(t)))` stands in for a
//! typical sorted series, the Kolmogorov distance measures how far the data's
//! empirical distribution sits from it, and a lag-1 regression of
//! `log(y/phi + delta)` on its own lag and the lagged level mimics the latent
//! dynamics. The phi interval divides an exact Poisson interval for
//! `phi * sum N` by the stored quantiles of `sum N`.

use thiserror::Error;

use crate::kernels::{invert_poisson_cdf, ols_fit, KernelError};
use crate::model::ObservationSeries;
use crate::tables::{eval_surrogate, SurrogateEntry};

/// Default offset inside the logs of the dynamics regression.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Positive floor for a phi interval whose lower endpoint underflowed.
const PHI_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("series too short: need at least {need}, got {got}")]
    SeriesTooShort { need: usize, got: usize },
    #[error("dynamics degenerate: {0}")]
    DegenerateDynamics(String),
    #[error("reference sample overflowed at rank {rank}")]
    ReferenceOverflow { rank: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Approximation interval for the observation scale phi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the lower endpoint underflowed and was floored.
    pub lo_floored: bool,
}

/// Output of the lag-1 dynamics regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsFit {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub resid_sd: f64,
    pub delta: f64,
}

/// The five tested statistics of one series. A degenerate regression leaves
/// the four dynamics components NaN with `dynamics_valid` cleared; the
/// Kolmogorov distance is always present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatVector {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub resid_sd: f64,
    pub k_dist: f64,
    pub dynamics_valid: bool,
}

impl StatVector {
    /// The five statistics in report order.
    pub fn values(&self) -> [f64; 5] {
        [
            self.beta1,
            self.beta2,
            self.beta3,
            self.resid_sd,
            self.k_dist,
        ]
    }
}

/// The integer reference sample `round(phi * exp(f(t)))`, rounding half up.
pub fn reference_sample(
    entry: &SurrogateEntry,
    phi: f64,
    n: usize,
) -> Result<Vec<u64>, StatsError> {
    if !phi.is_finite() || phi <= 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "phi must be finite and > 0, got {phi}"
        )));
    }
    let curve = eval_surrogate(entry, n);
    let mut out = Vec::with_capacity(n);
    for (i, f) in curve.into_iter().enumerate() {
        let value = phi * f.exp();
        if !value.is_finite() || value >= u64::MAX as f64 {
            return Err(StatsError::ReferenceOverflow { rank: i + 1 });
        }
        out.push((value + 0.5).floor() as u64);
    }
    Ok(out)
}

/// Kolmogorov distance between two equal-length integer samples: the largest
/// gap between their empirical CDFs, evaluated exactly over the union of
/// support points.
pub fn kolmogorov_distance(a: &[u64], b: &[u64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    Ok(kolmogorov_sorted(&sa, &sb))
}

/// Distance between pre-sorted samples; the hot path for simulations.
pub(crate) fn kolmogorov_sorted(sa: &[u64], sb: &[u64]) -> f64 {
    let n = sa.len() as f64;
    let m = sb.len() as f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut sup = 0.0_f64;
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&va), Some(&vb)) => va.min(vb),
            (Some(&va), None) => va,
            (None, Some(&vb)) => vb,
            (None, None) => break,
        };
        while ia < sa.len() && sa[ia] == x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == x {
            ib += 1;
        }
        let diff = (ia as f64 / n - ib as f64 / m).abs();
        if diff > sup {
            sup = diff;
        }
    }
    sup
}

/// Approximation interval for phi from the series total and the stored
/// quantiles of `sum N(t)`.
///
/// `lambda_l` solves `P(X <= sum_y) = (1+beta)/2` and `lambda_u` solves it at
/// `(1-beta)/2`; the interval is `[lambda_l / q_hi, lambda_u / q_lo]`.
pub fn phi_interval(
    sum_y: u64,
    q_lo_sum_n: f64,
    q_hi_sum_n: f64,
    beta: f64,
) -> Result<PhiInterval, StatsError> {
    if q_lo_sum_n.is_nan() || q_lo_sum_n <= 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "q_lo_sum_n must be > 0, got {q_lo_sum_n}"
        )));
    }
    if q_hi_sum_n.is_nan() || q_hi_sum_n < q_lo_sum_n {
        return Err(StatsError::InvalidArgument(format!(
            "sum-N quantiles out of order: {q_lo_sum_n} > {q_hi_sum_n}"
        )));
    }
    if beta.is_nan() || beta <= 0.0 || beta >= 1.0 {
        return Err(StatsError::InvalidArgument(format!(
            "beta must be in (0, 1), got {beta}"
        )));
    }
    let lambda_l = invert_poisson_cdf(sum_y, (1.0 + beta) / 2.0)?;
    let lambda_u = invert_poisson_cdf(sum_y, (1.0 - beta) / 2.0)?;
    let mut lo = lambda_l / q_hi_sum_n;
    let hi = lambda_u / q_lo_sum_n;
    let mut lo_floored = false;
    if lo <= 0.0 {
        lo = PHI_FLOOR;
        lo_floored = true;
    }
    Ok(PhiInterval { lo, hi, lo_floored })
}

/// Regress `log(y(t)/phi + delta)` on `log(y(t-1)/phi + delta)` and
/// `y(t-1)/phi` over `t = 2..n`; the residual SD uses denominator `(n-1)-3`.
pub fn dynamics_fit(
    series: &ObservationSeries,
    phi: f64,
    delta: f64,
) -> Result<DynamicsFit, StatsError> {
    if !phi.is_finite() || phi <= 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "phi must be finite and > 0, got {phi}"
        )));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "delta must be finite and > 0, got {delta}"
        )));
    }
    let n = series.len();
    if n < 8 {
        return Err(StatsError::SeriesTooShort { need: 8, got: n });
    }
    let y = series.counts();
    let m = n - 1;
    let mut design = nalgebra::DMatrix::zeros(m, 3);
    let mut response = nalgebra::DVector::zeros(m);
    for t in 1..n {
        let lagged = y[t - 1] as f64 / phi;
        design[(t - 1, 0)] = 1.0;
        design[(t - 1, 1)] = (lagged + delta).ln();
        design[(t - 1, 2)] = lagged;
        response[t - 1] = (y[t] as f64 / phi + delta).ln();
    }
    match ols_fit(&design, &response) {
        Ok(fit) => Ok(DynamicsFit {
            beta1: fit.coefficients[0],
            beta2: fit.coefficients[1],
            beta3: fit.coefficients[2],
            resid_sd: fit.residual_sd,
            delta,
        }),
        Err(KernelError::Collinear { .. }) => Err(StatsError::DegenerateDynamics(
            "regressors are collinear (constant or near-constant series)".into(),
        )),
        Err(e) => Err(e.into()),
    }
}

/// One-step forecasts for `t = 2..n` from a fitted dynamics regression:
/// `phi * exp(beta1) * (y(t-1)/phi + delta)^beta2 * exp(beta3 * y(t-1)/phi)`.
/// Diagnostic plot data, not a tested statistic.
pub fn forecast(series: &ObservationSeries, phi: f64, delta: f64, fit: &DynamicsFit) -> Vec<f64> {
    let y = series.counts();
    let mut out = Vec::with_capacity(y.len().saturating_sub(1));
    for t in 1..y.len() {
        let lagged = y[t - 1] as f64 / phi;
        let value = phi
            * fit.beta1.exp()
            * (lagged + delta).powf(fit.beta2)
            * (fit.beta3 * lagged).exp();
        out.push(value);
    }
    out
}

/// The five statistics of a series against a surrogate entry.
///
/// A degenerate dynamics regression yields a flagged vector (NaN regression
/// components) rather than an error; downstream treats any flagged component
/// as out of bounds.
pub fn stat_vector(
    series: &ObservationSeries,
    phi: f64,
    entry: &SurrogateEntry,
    delta: f64,
) -> Result<StatVector, StatsError> {
    let mut reference = reference_sample(entry, phi, series.len())?;
    reference.sort_unstable();
    stat_vector_with_reference(series, phi, &reference, delta)
}

/// As [`stat_vector`] but against an already sorted reference sample, so the
/// per-theta reference is computed once per simulation batch.
pub fn stat_vector_with_reference(
    series: &ObservationSeries,
    phi: f64,
    sorted_reference: &[u64],
    delta: f64,
) -> Result<StatVector, StatsError> {
    if series.is_empty() {
        return Err(StatsError::Empty);
    }
    if series.len() != sorted_reference.len() {
        return Err(StatsError::LengthMismatch {
            a: series.len(),
            b: sorted_reference.len(),
        });
    }
    let mut sorted = series.counts().to_vec();
    sorted.sort_unstable();
    let k_dist = kolmogorov_sorted(&sorted, sorted_reference);
    match dynamics_fit(series, phi, delta) {
        Ok(fit) => Ok(StatVector {
            beta1: fit.beta1,
            beta2: fit.beta2,
            beta3: fit.beta3,
            resid_sd: fit.resid_sd,
            k_dist,
            dynamics_valid: true,
        }),
        Err(StatsError::DegenerateDynamics(_)) => Ok(StatVector {
            beta1: f64::NAN,
            beta2: f64::NAN,
            beta3: f64::NAN,
            resid_sd: f64::NAN,
            k_dist,
            dynamics_valid: false,
        }),
        Err(e) => Err(e),
    }
}
