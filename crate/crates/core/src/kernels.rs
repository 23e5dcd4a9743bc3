//! Small numerical primitives used everywhere else.
//!
//! Least squares via Householder QR with a singular-value rank check,
//! order-statistic quantiles, the Poisson CDF through the regularized
//! incomplete gamma (stable for means up to 1e7 and beyond), its inverse by
//! bisection, the classical covariance, the Kent–Tyler multivariate-t
//! location/scatter M-estimate, and Mahalanobis distances. Everything here is
//! a pure function; callers parallelize freely.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Relative singular-value cutoff below which a design is treated as rank
/// deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Default convergence tolerance for [`kent_tyler_fit`].
pub const KT_DEFAULT_TOL: f64 = 1e-8;

/// Default iteration cap for [`kent_tyler_fit`].
pub const KT_DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("design needs more rows than columns: {rows} rows, {cols} columns")]
    Underdetermined { rows: usize, cols: usize },
    #[error(
        "design is rank deficient: smallest/largest singular value {ratio:.3e} below {RANK_TOLERANCE:.0e}"
    )]
    Collinear { ratio: f64 },
    #[error("empty sample")]
    EmptySample,
    #[error("quantile level {0} outside (0, 1]")]
    BadQuantileLevel(f64),
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("target probability {0} outside the open unit interval")]
    BadProbability(f64),
    #[error("CDF inversion failed to converge (y={y}, p={p})")]
    InversionFailed { y: u64, p: f64 },
    #[error("{estimator} scatter is singular")]
    SingularScatter { estimator: &'static str },
    #[error(
        "fixed-point iteration did not converge within {max_iter} iterations \
         (last change {last_change:.3e})"
    )]
    NoConvergence {
        max_iter: usize,
        last_change: f64,
        last: Box<ScatterEstimate>,
    },
    #[error("dimension mismatch: vector has length {got}, estimate has dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A least-squares fit: coefficients plus the residual standard error with
/// denominator `m - p` for `m` rows and `p` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub residual_sd: f64,
}

/// A location vector with a symmetric positive-definite scatter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterEstimate {
    location: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl ScatterEstimate {
    /// Validates positive definiteness; producers surface degeneracy here.
    fn checked(
        location: DVector<f64>,
        scatter: DMatrix<f64>,
        estimator: &'static str,
    ) -> Result<Self, KernelError> {
        if Cholesky::new(scatter.clone()).is_none() {
            return Err(KernelError::SingularScatter { estimator });
        }
        Ok(ScatterEstimate { location, scatter })
    }

    pub fn location(&self) -> &DVector<f64> {
        &self.location
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }
}

/// Ordinary least squares via Householder QR.
///
/// Stable for condition numbers up to about 1e8; designs whose smallest
/// singular value falls below [`RANK_TOLERANCE`] times the largest are
/// rejected as collinear.
pub fn ols_fit(design: &DMatrix<f64>, response: &DVector<f64>) -> Result<LinearFit, KernelError> {
    let (m, p) = design.shape();
    if m <= p {
        return Err(KernelError::Underdetermined { rows: m, cols: p });
    }
    if response.len() != m {
        return Err(KernelError::InvalidArgument(format!(
            "response length {} does not match {} design rows",
            response.len(),
            m
        )));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    // Singular values of R equal those of the design.
    let sv = r.clone().svd(false, false).singular_values;
    let (mut smin, mut smax) = (f64::INFINITY, 0.0_f64);
    for &s in sv.iter() {
        smin = smin.min(s);
        smax = smax.max(s);
    }
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio.is_nan() || ratio < RANK_TOLERANCE {
        return Err(KernelError::Collinear { ratio });
    }
    let qty = qr.q().tr_mul(response);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(KernelError::Collinear { ratio })?;
    let residual = response - design * &beta;
    let rss = residual.norm_squared();
    let residual_sd = (rss / (m - p) as f64).max(0.0).sqrt();
    Ok(LinearFit {
        coefficients: beta.iter().copied().collect(),
        residual_sd,
    })
}

/// The `ceil(p * m)`-th smallest element of the sample.
///
/// A pure order statistic: no interpolation, always an element of the sample,
/// and `p <= 1/m` returns the minimum.
pub fn empirical_quantile(sample: &[f64], p: f64) -> Result<f64, KernelError> {
    if sample.is_empty() {
        return Err(KernelError::EmptySample);
    }
    if p.is_nan() || p <= 0.0 || p > 1.0 {
        return Err(KernelError::BadQuantileLevel(p));
    }
    let m = sample.len();
    let k = ((p * m as f64).ceil() as usize).clamp(1, m);
    let mut work = sample.to_vec();
    let (_, kth, _) = work.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

// ---------------------------------------------------------------------------
// Regularized incomplete gamma and the Poisson CDF.
// ---------------------------------------------------------------------------

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 1_000_000;
const FPMIN: f64 = 1e-300;

/// `ln(x^a e^{-x} / Gamma(a))`.
///
/// For large `a` the naive `a ln x - x - lnGamma(a)` loses eight digits to
/// cancellation between 1e8-sized terms, which would cap the CDF accuracy
/// near 1e-8; the Stirling form keeps the exponent error at the 1e-12 level
/// for `a` up to 1e7 and beyond.
fn ln_gamma_prefactor(a: f64, x: f64) -> f64 {
    if a < 1e4 {
        return a * x.ln() - x - ln_gamma(a);
    }
    let d = (x - a) / a;
    // a*ln(x/a) + (a - x) = a*(ln1p(d) - d), evaluated without cancellation.
    let core = a * (d.ln_1p() - d);
    let a2 = a * a;
    let stirling_corr = (1.0 / 12.0 - (1.0 / 360.0 - 1.0 / (1260.0 * a2)) / a2) / a;
    core + 0.5 * (a / (2.0 * std::f64::consts::PI)).ln() - stirling_corr
}

/// Lower regularized incomplete gamma `P(a, x)` by series; requires `x < a + 1`.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * ln_gamma_prefactor(a, x).exp()
}

/// Upper regularized incomplete gamma `Q(a, x)` by continued fraction
/// (modified Lentz); requires `x >= a + 1`.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    h * ln_gamma_prefactor(a, x).exp()
}

/// `P(Poisson(lambda) <= y)` via the identity with the upper regularized
/// incomplete gamma, `Q(y + 1, lambda)`.
///
/// Absolute error stays near 1e-11 for `lambda` up to 1e7.
pub fn poisson_cdf(y: u64, lambda: f64) -> Result<f64, KernelError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(KernelError::BadLambda(lambda));
    }
    if lambda == 0.0 {
        return Ok(1.0);
    }
    let a = (y + 1) as f64;
    let q = if lambda < a + 1.0 {
        1.0 - gamma_p_series(a, lambda)
    } else {
        gamma_q_continued_fraction(a, lambda)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Solve `poisson_cdf(y, lambda) = p` for `lambda`.
///
/// The CDF is continuous and strictly decreasing in `lambda`, so bracketed
/// bisection always converges; the result satisfies
/// `|poisson_cdf(y, lambda) - p| <= 1e-9`.
pub fn invert_poisson_cdf(y: u64, p: f64) -> Result<f64, KernelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(KernelError::BadProbability(p));
    }
    let mut lo = (y as f64 / 10.0).max(1e-12);
    let mut hi = 10.0 * (y as f64 + 1.0) + 50.0;
    // The bracket is generous already; widen defensively rather than fail.
    let mut guard = 0;
    while poisson_cdf(y, lo)? < p {
        lo /= 16.0;
        guard += 1;
        if guard > 64 {
            return Err(KernelError::InversionFailed { y, p });
        }
    }
    while poisson_cdf(y, hi)? > p {
        hi *= 4.0;
        guard += 1;
        if guard > 128 {
            return Err(KernelError::InversionFailed { y, p });
        }
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let c = poisson_cdf(y, mid)?;
        if c > p {
            lo = mid;
        } else {
            hi = mid;
        }
        // Tight in both spaces: probability residual for the CDF contract,
        // interval width so flat tails still pin lambda itself.
        if (c - p).abs() <= 1e-9 && hi - lo <= 1e-10 * mid.max(1e-6) {
            return Ok(mid);
        }
        if hi - lo <= f64::EPSILON * mid {
            return Ok(mid);
        }
    }
    Err(KernelError::InversionFailed { y, p })
}

// ---------------------------------------------------------------------------
// Covariance estimators and Mahalanobis distance.
// ---------------------------------------------------------------------------

/// Componentwise mean and unbiased sample covariance (denominator `m - 1`) of
/// the rows of an `m x k` matrix.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<ScatterEstimate, KernelError> {
    let (m, k) = data.shape();
    if m <= k {
        return Err(KernelError::Underdetermined { rows: m, cols: k });
    }
    let location = data.row_mean().transpose();
    let mut scatter = DMatrix::zeros(k, k);
    for i in 0..m {
        let centered = data.row(i).transpose() - &location;
        scatter += &centered * centered.transpose();
    }
    scatter /= (m - 1) as f64;
    ScatterEstimate::checked(location, scatter, "sample covariance")
}

/// Joint location/scatter M-estimate for the multivariate t with `nu` degrees
/// of freedom, by fixed-point iteration from the sample mean and covariance.
///
/// With `d_i^2 = (x_i - mu)' Sigma^{-1} (x_i - mu)` and weights
/// `w_i = (nu + k) / (nu + d_i^2)`, each sweep sets
/// `mu <- sum(w_i x_i) / sum(w_i)` and
/// `Sigma <- (1/m) sum w_i (x_i - mu)(x_i - mu)'`, until the largest
/// entrywise change relative to `max(1, |old|)` drops below `tol`.
/// The breakdown point in `k` dimensions is `1 / (k + nu)`.
pub fn kent_tyler_fit(
    data: &DMatrix<f64>,
    nu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ScatterEstimate, KernelError> {
    let (m, k) = data.shape();
    if m <= k + 1 {
        return Err(KernelError::Underdetermined { rows: m, cols: k });
    }
    if nu.is_nan() || nu <= 0.0 {
        return Err(KernelError::InvalidArgument(format!(
            "nu must be > 0, got {nu}"
        )));
    }
    if tol.is_nan() || tol <= 0.0 || max_iter == 0 {
        return Err(KernelError::InvalidArgument(
            "tol must be > 0 and max_iter >= 1".into(),
        ));
    }

    let start = sample_covariance(data)?;
    let mut location = start.location;
    let mut scatter = start.scatter;
    let mf = m as f64;
    let mut last_change = f64::INFINITY;

    for _ in 0..max_iter {
        let chol = Cholesky::new(scatter.clone()).ok_or(KernelError::SingularScatter {
            estimator: "kent-tyler",
        })?;
        let mut weights = Vec::with_capacity(m);
        let mut weight_sum = 0.0;
        for i in 0..m {
            let centered = data.row(i).transpose() - &location;
            let d2 = centered.dot(&chol.solve(&centered));
            let w = (nu + k as f64) / (nu + d2);
            weight_sum += w;
            weights.push(w);
        }
        let mut new_location = DVector::zeros(k);
        for (i, &w) in weights.iter().enumerate() {
            new_location += data.row(i).transpose() * w;
        }
        new_location /= weight_sum;
        let mut new_scatter = DMatrix::zeros(k, k);
        for (i, &w) in weights.iter().enumerate() {
            let centered = data.row(i).transpose() - &new_location;
            new_scatter += &centered * centered.transpose() * w;
        }
        new_scatter /= mf;

        last_change = 0.0_f64;
        for (new, old) in new_location.iter().zip(location.iter()) {
            last_change = last_change.max((new - old).abs() / old.abs().max(1.0));
        }
        for (new, old) in new_scatter.iter().zip(scatter.iter()) {
            last_change = last_change.max((new - old).abs() / old.abs().max(1.0));
        }
        location = new_location;
        scatter = new_scatter;
        if last_change < tol {
            return ScatterEstimate::checked(location, scatter, "kent-tyler");
        }
    }
    Err(KernelError::NoConvergence {
        max_iter,
        last_change,
        last: Box::new(ScatterEstimate { location, scatter }),
    })
}

/// `sqrt((x - mu)' Sigma^{-1} (x - mu))`.
pub fn mahalanobis(x: &DVector<f64>, est: &ScatterEstimate) -> Result<f64, KernelError> {
    let distances = mahalanobis_many(std::slice::from_ref(x), est)?;
    Ok(distances[0])
}

/// Mahalanobis distances of many vectors under one estimate; the scatter is
/// factored once.
pub fn mahalanobis_many(
    xs: &[DVector<f64>],
    est: &ScatterEstimate,
) -> Result<Vec<f64>, KernelError> {
    let chol = Cholesky::new(est.scatter.clone()).ok_or(KernelError::SingularScatter {
        estimator: "mahalanobis",
    })?;
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        if x.len() != est.dim() {
            return Err(KernelError::DimensionMismatch {
                expected: est.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::InvalidArgument(
                "vector contains non-finite values".into(),
            ));
        }
        let centered = x - &est.location;
        let d2 = centered.dot(&chol.solve(&centered));
        out.push(d2.max(0.0).sqrt());
    }
    Ok(out)
}
