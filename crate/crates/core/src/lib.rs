//! Simulation and adequacy analysis for the stochastic Ricker model.
//!
//! The observation model is a Poisson layer on top of a noisy Ricker map:
//! counts `Y(t) ~ Poisson(phi * N(t))` where the latent population follows
//! `log N(t+1) = log r + log N(t) - N(t) + sigma * eps(t+1)` with standard
//! Gaussian innovations. A parameter triple `theta = (log r, sigma, phi)` is
//! judged an *adequate approximation* to an observed count series when five
//! summary statistics of the data (three lag-1 regression coefficients, the
//! residual SD of that regression, and the Kolmogorov distance to a surrogate
//! reference sample) all fall inside simulation bounds calibrated at level
//! `alpha`. Scanning a `(log r, sigma)` grid crossed with a data-driven `phi`
//! grid yields the approximation region; unlike a confidence region it may be
//! empty.
//!
//! Modules, bottom up:
//!
//! * [`rng`] — seedable, splittable random streams so batch results never
//!   depend on worker count.
//! * [`model`] — exact simulation of the latent map and the Poisson layer.
//! * [`kernels`] — small numerical primitives: least squares, order-statistic
//!   quantiles, Poisson CDF and its inversion, covariance estimators,
//!   Mahalanobis distance.
//! * [`tables`] — the 22-value surrogate entries (order-statistic fit plus
//!   sum-of-N quantiles) built per grid point and stored as CSV.
//! * [`stats`] — the five data statistics and the phi approximation interval.
//! * [`region`] — bounds, p-values, adequacy verdicts, region scans, coverage
//!   calibration and Mahalanobis-based alternatives.

pub mod kernels;
pub mod model;
pub mod region;
pub mod rng;
pub mod stats;
pub mod tables;

/// Default quantile level for both the stored sum-of-N quantiles and the phi
/// approximation interval.
pub const DEFAULT_BETA: f64 = 0.99;

pub use model::{LatentPath, ObservationSeries, Theta, DEFAULT_BURN_IN};
pub use rng::RandomStream;
