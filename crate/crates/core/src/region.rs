//! Bounds, p-values, adequacy verdicts, region scans and calibration.
//!
//! For one candidate `theta`, `n_sims` series are simulated and reduced to
//! statistic vectors. The exceptional probability `1 - alpha` is spent
//! equally across the five statistics: the four regression-side statistics
//! get two-sided bounds at levels `(1-alpha)/10` and `1-(1-alpha)/10`, the
//! Kolmogorov distance a one-sided upper bound at `(4+alpha)/5`, so the five
//! tail masses sum to `1 - alpha` exactly. The phi interval's own cost is
//! near zero and deliberately not charged. `theta` is adequate when every
//! observed statistic respects its bounds.
//!
//! Scanning every table entry crossed with a data-driven phi grid yields the
//! approximation region; an empty region is a legitimate finding. Coverage
//! can be calibrated by simulation (`alpha_tilde = 2 alpha - alpha_star`),
//! and the five rank-based p-values can be replaced by a single Mahalanobis
//! p-value under either the classical covariance or the robust Kent-Tyler
//! scatter.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{
    empirical_quantile, kent_tyler_fit, mahalanobis_many, sample_covariance, KernelError,
    KT_DEFAULT_MAX_ITER, KT_DEFAULT_TOL,
};
use crate::model::{simulate_series, ModelError, ObservationSeries, Theta};
use crate::rng::RandomStream;
use crate::stats::{
    phi_interval, reference_sample, stat_vector, stat_vector_with_reference, PhiInterval,
    StatVector, StatsError,
};
use crate::tables::{SurrogateEntry, SurrogateTable};

/// Degrees of freedom used for the Kent-Tyler variant unless overridden.
pub const DEFAULT_NU: f64 = 2.0;

/// Minimum valid rows for quantile bounds.
const MIN_ROWS_BOUNDS: usize = 50;

/// Minimum valid rows for rank p-values.
const MIN_ROWS_P: usize = 100;

const REPORT_HEADER: &str = "log_r,sigma,phi,\
beta1_lower,beta1_value,beta1_upper,beta1_p,\
beta2_lower,beta2_value,beta2_upper,beta2_p,\
beta3_lower,beta3_value,beta3_upper,beta3_p,\
resid_sd_lower,resid_sd_value,resid_sd_upper,resid_sd_p,\
k_dist,k_upper,k_p,min_p,adequate,degeneracy_rate,maha_p_classical,maha_p_kt";

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "model mostly degenerate at theta {theta}: {rate_percent:.1}% of simulated series \
         had degenerate dynamics"
    )]
    MostlyDegenerate { theta: Theta, rate_percent: f64 },
    #[error("too few valid simulation rows: {valid} of {total}, need {need}")]
    TooFewValid {
        valid: usize,
        total: usize,
        need: usize,
    },
    #[error("data length {data} does not match table series length {table}")]
    LengthMismatch { data: usize, table: usize },
    #[error("observed statistics contain non-finite values")]
    InvalidObserved,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("report i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Statistic vectors of one simulation batch; flagged rows are retained and
/// counted but excluded from quantiles, ranks and scatter estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMatrix {
    rows: Vec<StatVector>,
}

impl StatMatrix {
    pub fn rows(&self) -> &[StatVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = &StatVector> {
        self.rows.iter().filter(|r| r.dynamics_valid)
    }

    pub fn n_valid(&self) -> usize {
        self.valid_rows().count()
    }

    /// Fraction of flagged (degenerate) rows.
    pub fn degeneracy_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            1.0 - self.n_valid() as f64 / self.rows.len() as f64
        }
    }

    /// Column `j` of [`StatVector::values`] over valid rows.
    fn column(&self, j: usize) -> Vec<f64> {
        self.valid_rows().map(|r| r.values()[j]).collect()
    }
}

/// Per-statistic bounds; the Kolmogorov entry is one-sided with a `-inf`
/// lower sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatBounds {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

/// Lower bound, observed value, upper bound and p-value of one statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatAssessment {
    pub lower: f64,
    pub observed: f64,
    pub upper: f64,
    pub p_value: f64,
}

/// Everything assessed for one theta: per-statistic bounds, values and
/// p-values (19 numbers), the minimum p-value and the verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct AdequacyReport {
    pub theta: Theta,
    /// beta1, beta2, beta3, residual SD, in that order.
    pub regression: [StatAssessment; 4],
    pub k_dist: f64,
    pub k_upper: f64,
    pub k_p: f64,
    pub min_p: f64,
    pub adequate: bool,
    /// Set when the data's own dynamics regression was degenerate.
    pub data_degenerate: bool,
    /// Fraction of flagged simulation rows at this theta.
    pub degeneracy_rate: f64,
    pub maha_p_classical: Option<f64>,
    pub maha_p_kent_tyler: Option<f64>,
}

impl AdequacyReport {
    /// The 19 assessment values in report order.
    pub fn assessment_values(&self) -> [f64; 19] {
        let mut out = [0.0; 19];
        for (j, a) in self.regression.iter().enumerate() {
            out[4 * j] = a.lower;
            out[4 * j + 1] = a.observed;
            out[4 * j + 2] = a.upper;
            out[4 * j + 3] = a.p_value;
        }
        out[16] = self.k_dist;
        out[17] = self.k_upper;
        out[18] = self.k_p;
        out
    }
}

/// A scan unit that could not be assessed; the scan records it and moves on.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFailure {
    pub log_r: f64,
    pub sigma: f64,
    pub phi: Option<f64>,
    pub message: String,
}

/// Outcome of a full region scan.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionResult {
    pub reports: Vec<AdequacyReport>,
    pub failures: Vec<ScanFailure>,
    pub alpha: f64,
    pub beta: f64,
    pub n_sims: usize,
    pub delta: f64,
}

impl RegionResult {
    /// The approximation region: every adequate theta.
    pub fn adequate(&self) -> impl Iterator<Item = &AdequacyReport> {
        self.reports.iter().filter(|r| r.adequate)
    }

    pub fn is_empty_region(&self) -> bool {
        self.adequate().next().is_none()
    }

    /// The theta maximizing the minimum p-value, ties toward the earliest
    /// scanned.
    pub fn best(&self) -> Option<&AdequacyReport> {
        self.reports.iter().reduce(|best, r| {
            if r.min_p > best.min_p {
                r
            } else {
                best
            }
        })
    }

    /// Write the report CSV: one row per assessed theta.
    pub fn write_csv(&self, path: &Path) -> Result<(), RegionError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.reports {
            write!(
                w,
                "{},{},{}",
                r.theta.log_r(),
                r.theta.sigma(),
                r.theta.phi()
            )?;
            for a in &r.regression {
                write!(w, ",{},{},{},{}", a.lower, a.observed, a.upper, a.p_value)?;
            }
            write!(
                w,
                ",{},{},{},{},{},{}",
                r.k_dist,
                r.k_upper,
                r.k_p,
                r.min_p,
                u8::from(r.adequate),
                r.degeneracy_rate
            )?;
            match r.maha_p_classical {
                Some(p) => write!(w, ",{p}")?,
                None => write!(w, ",")?,
            }
            match r.maha_p_kent_tyler {
                Some(p) => writeln!(w, ",{p}")?,
                None => writeln!(w, ",")?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Which Mahalanobis variant to use when collapsing the five statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MahalanobisKind {
    Classical,
    KentTyler { nu: f64 },
}

/// Knobs for [`assess_with_options`] and [`scan_region`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssessOptions {
    pub alpha: f64,
    pub n_sims: usize,
    pub delta: f64,
    pub maha_classical: bool,
    pub maha_kent_tyler: Option<f64>,
}

impl AssessOptions {
    pub fn new(alpha: f64, n_sims: usize, delta: f64) -> Self {
        AssessOptions {
            alpha,
            n_sims,
            delta,
            maha_classical: false,
            maha_kent_tyler: None,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), RegionError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(RegionError::BadAlpha(alpha))
    }
}

/// Simulate `n_sims` series from `theta` and reduce each to its statistic
/// vector against the entry's reference sample.
///
/// Sequential by contract; callers parallelize across thetas or replications
/// instead. Errors if more than half the rows are degenerate.
pub fn simulate_stats(
    theta: &Theta,
    entry: &SurrogateEntry,
    n: usize,
    n_sims: usize,
    delta: f64,
    rng: &RandomStream,
) -> Result<StatMatrix, RegionError> {
    if n_sims < 100 {
        return Err(RegionError::InvalidArgument(format!(
            "n_sims must be >= 100, got {n_sims}"
        )));
    }
    let mut reference = reference_sample(entry, theta.phi(), n)?;
    reference.sort_unstable();
    let mut rows = Vec::with_capacity(n_sims);
    for i in 0..n_sims {
        let series = simulate_series(theta, n, &rng.derive(i as u64))?;
        rows.push(stat_vector_with_reference(
            &series,
            theta.phi(),
            &reference,
            delta,
        )?);
    }
    let matrix = StatMatrix { rows };
    let rate = matrix.degeneracy_rate();
    if rate > 0.5 {
        return Err(RegionError::MostlyDegenerate {
            theta: *theta,
            rate_percent: 100.0 * rate,
        });
    }
    Ok(matrix)
}

/// Quantile bounds for the five statistics at level `alpha`.
///
/// Two-sided at `(1-alpha)/10` and `1-(1-alpha)/10` for the regression-side
/// statistics, one-sided upper at `(4+alpha)/5` for the Kolmogorov distance.
pub fn stat_bounds(sims: &StatMatrix, alpha: f64) -> Result<StatBounds, RegionError> {
    check_alpha(alpha)?;
    let valid = sims.n_valid();
    if valid < MIN_ROWS_BOUNDS {
        return Err(RegionError::TooFewValid {
            valid,
            total: sims.len(),
            need: MIN_ROWS_BOUNDS,
        });
    }
    let tail = (1.0 - alpha) / 10.0;
    let mut lower = [f64::NEG_INFINITY; 5];
    let mut upper = [0.0; 5];
    for j in 0..4 {
        let col = sims.column(j);
        lower[j] = empirical_quantile(&col, tail)?;
        upper[j] = empirical_quantile(&col, 1.0 - tail)?;
    }
    upper[4] = empirical_quantile(&sims.column(4), (4.0 + alpha) / 5.0)?;
    Ok(StatBounds { lower, upper })
}

/// Rank-based add-one p-values of the observed statistics.
///
/// Two-sided doubled-tail for the four regression-side statistics,
/// one-sided upper for the Kolmogorov distance. A degenerate observed vector
/// gets all-zero p-values; the caller carries the degeneracy flag.
pub fn p_values(sims: &StatMatrix, observed: &StatVector) -> Result<[f64; 5], RegionError> {
    let m = sims.n_valid();
    if m < MIN_ROWS_P {
        return Err(RegionError::TooFewValid {
            valid: m,
            total: sims.len(),
            need: MIN_ROWS_P,
        });
    }
    if !observed.dynamics_valid {
        return Ok([0.0; 5]);
    }
    if observed.values().iter().any(|v| !v.is_finite()) {
        return Err(RegionError::InvalidObserved);
    }
    let denom = (m + 1) as f64;
    let mut out = [0.0; 5];
    let obs = observed.values();
    for j in 0..4 {
        let at_most = sims.valid_rows().filter(|r| r.values()[j] <= obs[j]).count();
        let r = (at_most + 1) as f64 / denom;
        out[j] = (2.0 * r.min(1.0 - r)).min(1.0);
    }
    let at_least = sims.valid_rows().filter(|r| r.k_dist >= obs[4]).count();
    out[4] = (at_least + 1) as f64 / denom;
    Ok(out)
}

/// Assess one theta against the data with default (no Mahalanobis) options.
pub fn assess(
    theta: &Theta,
    data: &ObservationSeries,
    entry: &SurrogateEntry,
    alpha: f64,
    n_sims: usize,
    delta: f64,
    rng: &RandomStream,
) -> Result<AdequacyReport, RegionError> {
    assess_with_options(theta, data, entry, &AssessOptions::new(alpha, n_sims, delta), rng)
}

/// Full assessment: simulation bounds, p-values, verdict and optional
/// Mahalanobis p-values.
pub fn assess_with_options(
    theta: &Theta,
    data: &ObservationSeries,
    entry: &SurrogateEntry,
    opts: &AssessOptions,
    rng: &RandomStream,
) -> Result<AdequacyReport, RegionError> {
    check_alpha(opts.alpha)?;
    let sims = simulate_stats(theta, entry, data.len(), opts.n_sims, opts.delta, &rng.derive(0))?;
    let observed = stat_vector(data, theta.phi(), entry, opts.delta)?;
    let bounds = stat_bounds(&sims, opts.alpha)?;
    let p = p_values(&sims, &observed)?;

    let obs_values = observed.values();
    let mut regression = [StatAssessment {
        lower: 0.0,
        observed: 0.0,
        upper: 0.0,
        p_value: 0.0,
    }; 4];
    let mut adequate = observed.dynamics_valid;
    for j in 0..4 {
        regression[j] = StatAssessment {
            lower: bounds.lower[j],
            observed: obs_values[j],
            upper: bounds.upper[j],
            p_value: p[j],
        };
        adequate &= bounds.lower[j] <= obs_values[j] && obs_values[j] <= bounds.upper[j];
    }
    adequate &= observed.k_dist <= bounds.upper[4];
    let min_p = p.iter().copied().fold(f64::INFINITY, f64::min);

    let (maha_p_classical, maha_p_kent_tyler) = if observed.dynamics_valid {
        let classical = if opts.maha_classical {
            Some(mahalanobis_p(&sims, &observed, MahalanobisKind::Classical)?)
        } else {
            None
        };
        let kt = match opts.maha_kent_tyler {
            Some(nu) => Some(mahalanobis_p(
                &sims,
                &observed,
                MahalanobisKind::KentTyler { nu },
            )?),
            None => None,
        };
        (classical, kt)
    } else {
        (None, None)
    };

    Ok(AdequacyReport {
        theta: *theta,
        regression,
        k_dist: observed.k_dist,
        k_upper: bounds.upper[4],
        k_p: p[4],
        min_p,
        adequate,
        data_degenerate: !observed.dynamics_valid,
        degeneracy_rate: sims.degeneracy_rate(),
        maha_p_classical,
        maha_p_kent_tyler,
    })
}

/// Hard cap on phi grid points; reached only by pathological intervals
/// (e.g. a stored sum-N quantile near the underflow floor).
pub const PHI_GRID_CAP: usize = 1_000_000;

/// Largest phi grid a scan will assess per entry before recording a failure
/// instead.
const SCAN_PHI_GRID_LIMIT: usize = 10_000;

/// The phi grid over an approximation interval:
/// `max(10, ceil((hi - lo) / 3))` equally spaced points, endpoints included.
/// A degenerate interval yields repeated copies of `lo`; scans deduplicate.
/// The count is clamped at [`PHI_GRID_CAP`] so absurd intervals cannot
/// exhaust memory.
pub fn phi_grid(interval: &PhiInterval) -> Vec<f64> {
    let width = interval.hi - interval.lo;
    let m = (width / 3.0).ceil().clamp(10.0, PHI_GRID_CAP as f64) as usize;
    (0..m)
        .map(|i| interval.lo + width * i as f64 / (m - 1) as f64)
        .collect()
}

/// Scan every table entry crossed with its data-driven phi grid.
///
/// Units run in parallel, each on a substream derived from its position, and
/// reports are merged in scan order, so the result is independent of worker
/// count. Per-unit failures are recorded and the scan proceeds.
pub fn scan_region(
    data: &ObservationSeries,
    table: &SurrogateTable,
    opts: &AssessOptions,
    beta: f64,
    rng: &RandomStream,
) -> Result<RegionResult, RegionError> {
    check_alpha(opts.alpha)?;
    if data.len() != table.n() {
        return Err(RegionError::LengthMismatch {
            data: data.len(),
            table: table.n(),
        });
    }
    let sum_y = data.total();
    let mut units: Vec<(usize, usize, Theta)> = Vec::new();
    let mut failures: Vec<ScanFailure> = Vec::new();
    for (entry_idx, entry) in table.entries().iter().enumerate() {
        match phi_interval(sum_y, entry.q_lo_sum_n, entry.q_hi_sum_n, beta) {
            Ok(interval) => {
                let implied = ((interval.hi - interval.lo) / 3.0).ceil();
                if implied.is_nan() || implied > SCAN_PHI_GRID_LIMIT as f64 {
                    failures.push(ScanFailure {
                        log_r: entry.log_r,
                        sigma: entry.sigma,
                        phi: None,
                        message: format!(
                            "phi interval [{:.3e}, {:.3e}] implies {implied:.0} grid points, \
                             beyond the scan limit of {SCAN_PHI_GRID_LIMIT}",
                            interval.lo, interval.hi
                        ),
                    });
                    continue;
                }
                let mut phis = phi_grid(&interval);
                phis.dedup();
                for phi in phis {
                    match Theta::new(entry.log_r, entry.sigma, phi) {
                        Ok(theta) => units.push((units.len(), entry_idx, theta)),
                        Err(e) => failures.push(ScanFailure {
                            log_r: entry.log_r,
                            sigma: entry.sigma,
                            phi: Some(phi),
                            message: e.to_string(),
                        }),
                    }
                }
            }
            Err(e) => failures.push(ScanFailure {
                log_r: entry.log_r,
                sigma: entry.sigma,
                phi: None,
                message: e.to_string(),
            }),
        }
    }

    let outcomes: Vec<(Theta, Result<AdequacyReport, RegionError>)> = units
        .par_iter()
        .map(|&(unit, entry_idx, theta)| {
            let entry = &table.entries()[entry_idx];
            let report =
                assess_with_options(&theta, data, entry, opts, &rng.derive(unit as u64));
            (theta, report)
        })
        .collect();

    let mut reports = Vec::with_capacity(outcomes.len());
    for (theta, outcome) in outcomes {
        match outcome {
            Ok(report) => reports.push(report),
            Err(e) => failures.push(ScanFailure {
                log_r: theta.log_r(),
                sigma: theta.sigma(),
                phi: Some(theta.phi()),
                message: e.to_string(),
            }),
        }
    }
    Ok(RegionResult {
        reports,
        failures,
        alpha: opts.alpha,
        beta,
        n_sims: opts.n_sims,
        delta: opts.delta,
    })
}

/// Empirical covering probability and the recalibrated level.
///
/// Simulates `n_outer` datasets from `theta`, assesses each at the true theta
/// with `n_inner` simulations, and returns
/// `(alpha_star, alpha_tilde = 2 alpha - alpha_star)`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_alpha(
    theta: &Theta,
    entry: &SurrogateEntry,
    n: usize,
    alpha: f64,
    n_outer: usize,
    n_inner: usize,
    delta: f64,
    rng: &RandomStream,
) -> Result<(f64, f64), RegionError> {
    check_alpha(alpha)?;
    if n_outer < 500 {
        return Err(RegionError::InvalidArgument(format!(
            "n_outer must be >= 500, got {n_outer}"
        )));
    }
    let verdicts: Vec<bool> = (0..n_outer)
        .into_par_iter()
        .map(|i| -> Result<bool, RegionError> {
            let rep = rng.derive(i as u64);
            let data = simulate_series(theta, n, &rep.derive(0))?;
            let report = assess(theta, &data, entry, alpha, n_inner, delta, &rep.derive(1))?;
            Ok(report.adequate)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let alpha_star = verdicts.iter().filter(|&&a| a).count() as f64 / n_outer as f64;
    Ok((alpha_star, 2.0 * alpha - alpha_star))
}

/// Single p-value from Mahalanobis distances of the five statistics.
///
/// Location and scatter come from the valid simulated rows, under the
/// classical sample covariance or the Kent-Tyler multivariate-t estimate;
/// the p-value is the add-one rank of the observed distance.
pub fn mahalanobis_p(
    sims: &StatMatrix,
    observed: &StatVector,
    kind: MahalanobisKind,
) -> Result<f64, RegionError> {
    let k = 5;
    let valid: Vec<&StatVector> = sims.valid_rows().collect();
    let m = valid.len();
    if m < k + 2 {
        return Err(RegionError::TooFewValid {
            valid: m,
            total: sims.len(),
            need: k + 2,
        });
    }
    if observed.values().iter().any(|v| !v.is_finite()) {
        return Err(RegionError::InvalidObserved);
    }
    let data = DMatrix::from_fn(m, k, |i, j| valid[i].values()[j]);
    let estimate = match kind {
        MahalanobisKind::Classical => sample_covariance(&data)?,
        MahalanobisKind::KentTyler { nu } => {
            kent_tyler_fit(&data, nu, KT_DEFAULT_TOL, KT_DEFAULT_MAX_ITER)?
        }
    };
    let mut points: Vec<DVector<f64>> = valid
        .iter()
        .map(|r| DVector::from_row_slice(&r.values()))
        .collect();
    points.push(DVector::from_row_slice(&observed.values()));
    let distances = mahalanobis_many(&points, &estimate)?;
    let d_obs = distances[m];
    let at_least = distances[..m].iter().filter(|&&d| d >= d_obs).count();
    Ok((at_least + 1) as f64 / (m + 1) as f64)
}
