//! The stochastic Ricker model: latent dynamics and Poisson observation layer.
//!
//! The latent population iterates
//! `log N(t+1) = log r + log N(t) - N(t) + sigma * eps(t+1)` from `log N = 0`,
//! with the first `burn_in` steps discarded so returned samples approximate
//! the stationary regime. Observed counts are exact Poisson draws with mean
//! `phi * N(t)`, independent across `t` given the path.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::rng::RandomStream;

/// Burn-in used by [`simulate_series`] and the table builder.
pub const DEFAULT_BURN_IN: usize = 100;

/// Abort a path once `log N` exceeds this; `exp` overflows near 709.
///
/// Only the positive side is guarded. Deep negative excursions are part of
/// the process at high sigma (a population spike crashes `log N` to large
/// negative values, then the `log r` drift climbs back, producing the long
/// all-zero stretches seen in observed counts); `exp` merely underflows to
/// zero there and the log-scale iteration stays exact.
const LOG_N_GUARD: f64 = 700.0;

/// Below this mean the Poisson sampler uses sequential inversion; at or above
/// it, transformed rejection. Both are exact.
const POISSON_INVERSION_CUTOFF: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidTheta(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("latent path diverged at step {step}: log N exceeded {guard} (exp overflow)")]
    Diverged { step: usize, guard: f64 },
    #[error("observation mean at index {index} is not finite")]
    NonFiniteMean { index: usize },
    #[error("series i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("series parse failed at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A parameter triple identifying one candidate model.
///
/// The growth parameter is stored on the natural-log scale: grid formulas and
/// reported values all operate on `log r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    log_r: f64,
    sigma: f64,
    phi: f64,
}

impl Theta {
    /// Requires finite `log_r`, `sigma >= 0` and `phi > 0`.
    pub fn new(log_r: f64, sigma: f64, phi: f64) -> Result<Self, ModelError> {
        if !log_r.is_finite() {
            return Err(ModelError::InvalidTheta(format!(
                "log_r must be finite, got {log_r}"
            )));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(ModelError::InvalidTheta(format!(
                "sigma must be finite and >= 0, got {sigma}"
            )));
        }
        if !phi.is_finite() || phi <= 0.0 {
            return Err(ModelError::InvalidTheta(format!(
                "phi must be finite and > 0, got {phi}"
            )));
        }
        Ok(Theta { log_r, sigma, phi })
    }

    pub fn log_r(&self) -> f64 {
        self.log_r
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(log_r={}, sigma={}, phi={})",
            self.log_r, self.sigma, self.phi
        )
    }
}

/// A simulated latent path `N(t)`.
///
/// Mathematically strictly positive; in floating point a value underflows to
/// `0.0` once `log N` drops below about -745, which the Poisson layer treats
/// as a mean of zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    values: Vec<f64>,
}

impl LatentPath {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A length-n vector of nonnegative integer counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSeries {
    counts: Vec<u64>,
}

impl ObservationSeries {
    pub fn new(counts: Vec<u64>) -> Self {
        ObservationSeries { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Write one count per line, plain text.
    pub fn write_to(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for c in &self.counts {
            writeln!(w, "{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a series written by [`ObservationSeries::write_to`]; blank lines
    /// are rejected, the round trip is exact.
    pub fn read_from(path: &Path) -> Result<Self, ModelError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut counts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            let value = trimmed.parse::<u64>().map_err(|e| ModelError::Parse {
                line: i + 1,
                message: format!("{e} (got {trimmed:?})"),
            })?;
            counts.push(value);
        }
        Ok(ObservationSeries { counts })
    }
}

/// Iterate the latent map on the log scale; see [`simulate_latent`].
///
/// Returns the `n` retained `log N(t)` values. The initial state `log N = 0`
/// is never emitted: the first value produced is the result of one map step.
pub(crate) fn simulate_log_latent(
    theta: &Theta,
    n: usize,
    burn_in: usize,
    rng: &mut RandomStream,
) -> Result<Vec<f64>, ModelError> {
    if n == 0 {
        return Err(ModelError::InvalidArgument("n must be >= 1".into()));
    }
    let log_r = theta.log_r;
    let sigma = theta.sigma;
    let mut log_n = 0.0_f64;
    let mut out = Vec::with_capacity(n);
    for step in 0..burn_in + n {
        let eps = sigma * rng.standard_normal();
        log_n = log_r + log_n - log_n.exp() + eps;
        if !log_n.is_finite() || log_n > LOG_N_GUARD {
            return Err(ModelError::Diverged {
                step: step + 1,
                guard: LOG_N_GUARD,
            });
        }
        if step >= burn_in {
            out.push(log_n);
        }
    }
    Ok(out)
}

/// Simulate `n` values of the latent process after `burn_in` discarded steps.
pub fn simulate_latent(
    theta: &Theta,
    n: usize,
    burn_in: usize,
    rng: &mut RandomStream,
) -> Result<LatentPath, ModelError> {
    let logs = simulate_log_latent(theta, n, burn_in, rng)?;
    Ok(LatentPath {
        values: logs.into_iter().map(f64::exp).collect(),
    })
}

/// Draw one exact Poisson count with the given mean.
///
/// Sequential inversion below the cutoff, Hoermann's transformed rejection
/// (PTRS) at or above it; both sample the exact distribution, which matters
/// because the Kolmogorov statistic compares integer distributions. Valid for
/// any finite `lambda >= 0`, in particular well past 1e7.
pub(crate) fn sample_poisson(rng: &mut RandomStream, lambda: f64) -> u64 {
    debug_assert!(lambda.is_finite() && lambda >= 0.0);
    if lambda < POISSON_INVERSION_CUTOFF {
        if lambda == 0.0 {
            return 0;
        }
        let mut k = 0u64;
        let mut pmf = (-lambda).exp();
        let mut cdf = pmf;
        let u = rng.uniform();
        while u > cdf {
            k += 1;
            pmf *= lambda / k as f64;
            cdf += pmf;
            if k > 1000 {
                break; // cdf has saturated in f64; u < 1 so this is unreachable in practice
            }
        }
        k
    } else {
        let log_lambda = lambda.ln();
        let b = 0.931 + 2.53 * lambda.sqrt();
        let a = -0.059 + 0.024_83 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = rng.uniform() - 0.5;
            let v = rng.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln()
                <= k * log_lambda - lambda - ln_gamma(k + 1.0)
            {
                return k as u64;
            }
        }
    }
}

/// Observe a latent path through the Poisson layer with scale `phi`.
pub fn observe(
    path: &LatentPath,
    phi: f64,
    rng: &mut RandomStream,
) -> Result<ObservationSeries, ModelError> {
    if !phi.is_finite() || phi <= 0.0 {
        return Err(ModelError::InvalidTheta(format!(
            "phi must be finite and > 0, got {phi}"
        )));
    }
    let mut counts = Vec::with_capacity(path.len());
    for (index, &n_t) in path.values().iter().enumerate() {
        let lambda = phi * n_t;
        if !lambda.is_finite() {
            return Err(ModelError::NonFiniteMean { index });
        }
        counts.push(sample_poisson(rng, lambda));
    }
    Ok(ObservationSeries { counts })
}

/// Simulate a full observed series: latent path plus Poisson layer, each on
/// its own substream, with the default burn-in.
pub fn simulate_series(
    theta: &Theta,
    n: usize,
    rng: &RandomStream,
) -> Result<ObservationSeries, ModelError> {
    let path = simulate_latent(theta, n, DEFAULT_BURN_IN, &mut rng.derive(0))?;
    observe(&path, theta.phi, &mut rng.derive(1))
}
