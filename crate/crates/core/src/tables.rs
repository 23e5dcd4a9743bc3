//! Surrogate tables: a 22-value summary per `(log r, sigma)` grid point.
//!
//! For each grid point the builder simulates latent paths, averages the
//! sorted `log N` values into the expected order-statistic curve, and
//! compresses that curve into two 9-coefficient least-squares fits (lower
//! half and upper range) plus the two largest order statistics stored
//! verbatim. The same simulations also yield the stored quantiles of
//! `sum N(t)` that the phi approximation interval needs. Built once, stored
//! as CSV, reused by every analysis.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{empirical_quantile, ols_fit, KernelError};
use crate::model::{simulate_log_latent, ModelError, Theta, DEFAULT_BURN_IN};
use crate::rng::RandomStream;

/// Grid size used throughout the worked analyses.
pub const DEFAULT_GRID_SIZE: usize = 30;

/// Simulations per grid point for a production table.
pub const DEFAULT_TABLE_SIMS: usize = 10_000;

/// Number of regression basis functions per half.
pub const BASIS_SIZE: usize = 9;

const TABLE_HEADER: &str = "n,log_r,sigma,cl0,cl1,cl2,cl3,cl4,cl5,cl6,cl7,cl8,\
cu0,cu1,cu2,cu3,cu4,cu5,cu6,cu7,cu8,os_nm1,os_n,q_lo_sumN,q_hi_sumN";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid point (log_r={log_r}, sigma={sigma}) failed: {source}")]
    PointFailed {
        log_r: f64,
        sigma: f64,
        #[source]
        source: Box<TableError>,
    },
    #[error("table build failed at {count} grid point(s): {}{}", listed.join("; "), if *count > listed.len() { "; ..." } else { "" })]
    Build { count: usize, listed: Vec<String> },
    #[error(
        "query (log_r={log_r}, sigma={sigma}) outside the grid box \
         log_r in [{lr_min}, {lr_max}], sigma in [{s_min}, {s_max}]"
    )]
    OutOfRange {
        log_r: f64,
        sigma: f64,
        lr_min: f64,
        lr_max: f64,
        s_min: f64,
        s_max: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("table i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("table parse failed at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// The `(log r, sigma)` grid a table is built over.
///
/// Both axes are strictly increasing; entries cover the full cross product in
/// `log_r`-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    log_r: Vec<f64>,
    sigma: Vec<f64>,
}

impl GridSpec {
    /// The standard grid: `log r_i = 1.05 + 4i/n_g` for `i = 1..n_g` and
    /// `sigma_i = 0.05 + 1.1(i-1)/(n_g-1)`; requires `n_g >= 2`.
    pub fn formula(n_g: usize) -> Result<Self, TableError> {
        if n_g < 2 {
            return Err(TableError::InvalidArgument(format!(
                "formula grid needs n_g >= 2, got {n_g}"
            )));
        }
        let log_r = (1..=n_g)
            .map(|i| 1.05 + 4.0 * i as f64 / n_g as f64)
            .collect();
        let sigma = (1..=n_g)
            .map(|i| 0.05 + 1.1 * (i as f64 - 1.0) / (n_g as f64 - 1.0))
            .collect();
        GridSpec::from_values(log_r, sigma)
    }

    /// The default 30 x 30 grid.
    pub fn default_grid() -> Self {
        GridSpec::formula(DEFAULT_GRID_SIZE).expect("default grid is valid")
    }

    /// A grid from explicit axis values, e.g. a reduced box around a point of
    /// interest. Single-point axes are allowed.
    pub fn from_values(log_r: Vec<f64>, sigma: Vec<f64>) -> Result<Self, TableError> {
        for (name, axis) in [("log_r", &log_r), ("sigma", &sigma)] {
            if axis.is_empty() {
                return Err(TableError::InvalidArgument(format!("empty {name} axis")));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(TableError::InvalidArgument(format!(
                    "non-finite value on the {name} axis"
                )));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TableError::InvalidArgument(format!(
                    "{name} axis must be strictly increasing"
                )));
            }
        }
        if sigma[0] < 0.0 {
            return Err(TableError::InvalidArgument(
                "sigma axis must be nonnegative".into(),
            ));
        }
        Ok(GridSpec { log_r, sigma })
    }

    /// Equally spaced axes over closed ranges, `per_axis` points each.
    pub fn from_ranges(
        log_r: (f64, f64),
        sigma: (f64, f64),
        per_axis: usize,
    ) -> Result<Self, TableError> {
        if per_axis == 0 {
            return Err(TableError::InvalidArgument("per_axis must be >= 1".into()));
        }
        let linspace = |(lo, hi): (f64, f64)| -> Vec<f64> {
            if per_axis == 1 {
                vec![lo]
            } else {
                (0..per_axis)
                    .map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64)
                    .collect()
            }
        };
        GridSpec::from_values(linspace(log_r), linspace(sigma))
    }

    pub fn log_r(&self) -> &[f64] {
        &self.log_r
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn point_count(&self) -> usize {
        self.log_r.len() * self.sigma.len()
    }

    /// Grid point for a flat index in `log_r`-major order.
    pub fn point(&self, index: usize) -> (f64, f64) {
        let ns = self.sigma.len();
        (self.log_r[index / ns], self.sigma[index % ns])
    }
}

/// The 22 stored values of one grid point: two 9-coefficient fits, the two
/// largest mean order statistics, and the `(1-beta)/2`, `(1+beta)/2`
/// quantiles of `sum N(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEntry {
    pub log_r: f64,
    pub sigma: f64,
    pub coeffs_lower: [f64; BASIS_SIZE],
    pub coeffs_upper: [f64; BASIS_SIZE],
    pub top_two: [f64; 2],
    pub q_lo_sum_n: f64,
    pub q_hi_sum_n: f64,
}

impl SurrogateEntry {
    fn validate(&self) -> Result<(), TableError> {
        let all = self
            .coeffs_lower
            .iter()
            .chain(self.coeffs_upper.iter())
            .chain(self.top_two.iter())
            .chain([&self.q_lo_sum_n, &self.q_hi_sum_n, &self.log_r, &self.sigma]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(TableError::InvalidArgument(
                "surrogate entry contains non-finite values".into(),
            ));
        }
        if self.q_lo_sum_n > self.q_hi_sum_n {
            return Err(TableError::InvalidArgument(format!(
                "sum-N quantiles out of order: {} > {}",
                self.q_lo_sum_n, self.q_hi_sum_n
            )));
        }
        if self.top_two[0] > self.top_two[1] {
            return Err(TableError::InvalidArgument(format!(
                "top order statistics out of order: {} > {}",
                self.top_two[0], self.top_two[1]
            )));
        }
        Ok(())
    }
}

/// Build provenance kept with freshly built tables; not persisted in the CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildMeta {
    pub n_sims: usize,
    pub seed_key: u64,
    pub beta: f64,
}

/// A full table: one [`SurrogateEntry`] per grid point, for one series
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTable {
    n: usize,
    grid: GridSpec,
    entries: Vec<SurrogateEntry>,
    meta: Option<BuildMeta>,
}

impl SurrogateTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn entries(&self) -> &[SurrogateEntry] {
        &self.entries
    }

    pub fn meta(&self) -> Option<&BuildMeta> {
        self.meta.as_ref()
    }

    /// Entry at minimal Euclidean distance in `(log_r, sigma)`; ties break
    /// toward smaller `log_r`, then smaller `sigma`. Queries outside the
    /// grid's bounding box are rejected.
    pub fn nearest_entry(&self, log_r: f64, sigma: f64) -> Result<&SurrogateEntry, TableError> {
        let lr = self.grid.log_r();
        let s = self.grid.sigma();
        let (lr_min, lr_max) = (lr[0], lr[lr.len() - 1]);
        let (s_min, s_max) = (s[0], s[s.len() - 1]);
        if !(log_r >= lr_min && log_r <= lr_max && sigma >= s_min && sigma <= s_max) {
            return Err(TableError::OutOfRange {
                log_r,
                sigma,
                lr_min,
                lr_max,
                s_min,
                s_max,
            });
        }
        // Entries are ordered by (log_r, sigma) ascending, so keeping the
        // first strict minimum implements the tie rule.
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, e) in self.entries.iter().enumerate() {
            let d2 = (e.log_r - log_r).powi(2) + (e.sigma - sigma).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        Ok(&self.entries[best])
    }

    /// Write the table as CSV, one row per grid point, reals with 17
    /// significant digits so the round trip is bit-faithful.
    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{TABLE_HEADER}")?;
        for e in &self.entries {
            write!(w, "{},{:.16e},{:.16e}", self.n, e.log_r, e.sigma)?;
            for c in &e.coeffs_lower {
                write!(w, ",{c:.16e}")?;
            }
            for c in &e.coeffs_upper {
                write!(w, ",{c:.16e}")?;
            }
            writeln!(
                w,
                ",{:.16e},{:.16e},{:.16e},{:.16e}",
                e.top_two[0], e.top_two[1], e.q_lo_sum_n, e.q_hi_sum_n
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a table written by [`SurrogateTable::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self, TableError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => {
                return Err(TableError::Parse {
                    line: 1,
                    message: "empty file".into(),
                })
            }
        };
        if header.trim() != TABLE_HEADER {
            return Err(TableError::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }
        let mut n: Option<usize> = None;
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 25 {
                return Err(TableError::Parse {
                    line: idx + 1,
                    message: format!("expected 25 fields, got {}", fields.len()),
                });
            }
            let parse = |field: &str, what: &str| -> Result<f64, TableError> {
                field.trim().parse::<f64>().map_err(|e| TableError::Parse {
                    line: idx + 1,
                    message: format!("{what}: {e}"),
                })
            };
            let row_n = fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| TableError::Parse {
                    line: idx + 1,
                    message: format!("n: {e}"),
                })?;
            match n {
                None => n = Some(row_n),
                Some(seen) if seen != row_n => {
                    return Err(TableError::Parse {
                        line: idx + 1,
                        message: format!("inconsistent n: {row_n} after {seen}"),
                    })
                }
                _ => {}
            }
            let mut coeffs_lower = [0.0; BASIS_SIZE];
            let mut coeffs_upper = [0.0; BASIS_SIZE];
            for j in 0..BASIS_SIZE {
                coeffs_lower[j] = parse(fields[3 + j], "cl")?;
                coeffs_upper[j] = parse(fields[3 + BASIS_SIZE + j], "cu")?;
            }
            let entry = SurrogateEntry {
                log_r: parse(fields[1], "log_r")?,
                sigma: parse(fields[2], "sigma")?,
                coeffs_lower,
                coeffs_upper,
                top_two: [parse(fields[21], "os_nm1")?, parse(fields[22], "os_n")?],
                q_lo_sum_n: parse(fields[23], "q_lo_sumN")?,
                q_hi_sum_n: parse(fields[24], "q_hi_sumN")?,
            };
            entry.validate().map_err(|e| TableError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        let n = n.ok_or(TableError::Parse {
            line: 2,
            message: "no data rows".into(),
        })?;
        // Reconstruct the grid and check the rows form its full cross product.
        let mut log_r: Vec<f64> = Vec::new();
        for e in &entries {
            if log_r.last() != Some(&e.log_r) {
                log_r.push(e.log_r);
            }
        }
        log_r.dedup();
        let per_block = entries.len() / log_r.len().max(1);
        let sigma: Vec<f64> = entries.iter().take(per_block).map(|e| e.sigma).collect();
        let grid = GridSpec::from_values(log_r, sigma).map_err(|e| TableError::Parse {
            line: 2,
            message: format!("rows do not form a grid: {e}"),
        })?;
        if grid.point_count() != entries.len() {
            return Err(TableError::Parse {
                line: 2,
                message: format!(
                    "expected {} rows for the grid, got {}",
                    grid.point_count(),
                    entries.len()
                ),
            });
        }
        for (i, e) in entries.iter().enumerate() {
            let (lr, s) = grid.point(i);
            if e.log_r != lr || e.sigma != s {
                return Err(TableError::Parse {
                    line: i + 2,
                    message: "rows are not in grid order".into(),
                });
            }
        }
        Ok(SurrogateTable {
            n,
            grid,
            entries,
            meta: None,
        })
    }
}

/// Per-point simulation summary: the mean sorted `log N` curve and the
/// per-simulation totals of `N(t)`.
fn point_statistics(
    log_r: f64,
    sigma: f64,
    n: usize,
    n_sims: usize,
    rng: &mut RandomStream,
) -> Result<(Vec<f64>, Vec<f64>), TableError> {
    if n_sims < 100 {
        return Err(TableError::InvalidArgument(format!(
            "n_sims must be >= 100, got {n_sims}"
        )));
    }
    let theta = Theta::new(log_r, sigma, 1.0).map_err(TableError::from)?;
    let mut mean_os = vec![0.0_f64; n];
    let mut sums = Vec::with_capacity(n_sims);
    for _ in 0..n_sims {
        let mut logs = simulate_log_latent(&theta, n, DEFAULT_BURN_IN, rng)?;
        sums.push(logs.iter().map(|l| l.exp()).sum());
        logs.sort_unstable_by(f64::total_cmp);
        for (acc, v) in mean_os.iter_mut().zip(&logs) {
            *acc += v;
        }
    }
    for v in &mut mean_os {
        *v /= n_sims as f64;
    }
    Ok((mean_os, sums))
}

/// Componentwise mean of the sorted `log N` values over `n_sims` simulated
/// paths; the output is nondecreasing.
pub fn mean_order_stats(
    log_r: f64,
    sigma: f64,
    n: usize,
    n_sims: usize,
    rng: &mut RandomStream,
) -> Result<Vec<f64>, TableError> {
    let (mean_os, _) = point_statistics(log_r, sigma, n, n_sims, rng)
        .map_err(|source| TableError::PointFailed {
            log_r,
            sigma,
            source: Box::new(source),
        })?;
    Ok(mean_os)
}

/// Result of compressing a mean order-statistic curve; the max fit errors are
/// reported so table quality can be audited.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateFit {
    pub coeffs_lower: [f64; BASIS_SIZE],
    pub coeffs_upper: [f64; BASIS_SIZE],
    pub top_two: [f64; 2],
    pub max_err_lower: f64,
    pub max_err_upper: f64,
}

/// Basis at normalized rank `x = t/n`: polynomials up to degree six plus one
/// sine/cosine pair.
///
/// At integer `x` the trigonometric terms would be degenerate (`sin(3 pi x)`
/// vanishes identically), so ranks are always normalized by `n` first.
fn basis(x: f64) -> [f64; BASIS_SIZE] {
    let x2 = x * x;
    let x3 = x2 * x;
    let arg = 3.0 * std::f64::consts::PI * x;
    [
        1.0,
        x,
        x2,
        x3,
        x2 * x2,
        x2 * x3,
        x3 * x3,
        arg.sin(),
        arg.cos(),
    ]
}

fn dot_basis(coeffs: &[f64; BASIS_SIZE], x: f64) -> f64 {
    let b = basis(x);
    let mut acc = 0.0;
    for j in 0..BASIS_SIZE {
        acc += coeffs[j] * b[j];
    }
    acc
}

/// Least-squares fit of one rank range; when the range is too short for the
/// full basis the trailing regressors are dropped and their coefficients
/// stored as zero, keeping the 22-value layout intact.
fn fit_half(mean_os: &[f64], n: usize, t_range: std::ops::RangeInclusive<usize>) -> Result<([f64; BASIS_SIZE], f64), TableError> {
    let ts: Vec<usize> = t_range.collect();
    let rows = ts.len();
    if rows < 2 {
        return Err(TableError::InvalidArgument(format!(
            "rank range too short to fit: {rows} rows"
        )));
    }
    let p = BASIS_SIZE.min(rows - 1);
    let mut design = nalgebra::DMatrix::zeros(rows, p);
    let mut response = nalgebra::DVector::zeros(rows);
    for (i, &t) in ts.iter().enumerate() {
        let b = basis(t as f64 / n as f64);
        for j in 0..p {
            design[(i, j)] = b[j];
        }
        response[i] = mean_os[t - 1];
    }
    let fit = ols_fit(&design, &response)?;
    let mut coeffs = [0.0_f64; BASIS_SIZE];
    coeffs[..p].copy_from_slice(&fit.coefficients);
    let mut max_err = 0.0_f64;
    for &t in &ts {
        let err = (dot_basis(&coeffs, t as f64 / n as f64) - mean_os[t - 1]).abs();
        max_err = max_err.max(err);
    }
    Ok((coeffs, max_err))
}

/// Fit the surrogate to a mean order-statistic curve.
///
/// Ranks `1..n/2` and `n/2+1..n-2` get separate 9-coefficient fits on the
/// normalized rank `x = t/n`; the two largest order statistics resist smooth
/// approximation and are stored verbatim. Odd `n` splits at `floor(n/2)`.
pub fn fit_surrogate(mean_os: &[f64], n: usize) -> Result<SurrogateFit, TableError> {
    if n < 8 {
        return Err(TableError::InvalidArgument(format!(
            "surrogate fit needs n >= 8, got {n}"
        )));
    }
    if mean_os.len() != n {
        return Err(TableError::InvalidArgument(format!(
            "curve has {} values, expected {n}",
            mean_os.len()
        )));
    }
    let half = n / 2;
    let (coeffs_lower, max_err_lower) = fit_half(mean_os, n, 1..=half)?;
    let (coeffs_upper, max_err_upper) = fit_half(mean_os, n, half + 1..=n - 2)?;
    Ok(SurrogateFit {
        coeffs_lower,
        coeffs_upper,
        top_two: [mean_os[n - 2], mean_os[n - 1]],
        max_err_lower,
        max_err_upper,
    })
}

/// Evaluate the stored surrogate at every rank `t = 1..n`.
pub fn eval_surrogate(entry: &SurrogateEntry, n: usize) -> Vec<f64> {
    let half = n / 2;
    (1..=n)
        .map(|t| {
            if t <= half {
                dot_basis(&entry.coeffs_lower, t as f64 / n as f64)
            } else if t <= n - 2 {
                dot_basis(&entry.coeffs_upper, t as f64 / n as f64)
            } else {
                entry.top_two[t - (n - 1)]
            }
        })
        .collect()
}

/// Build a full table over the grid.
///
/// Grid points run in parallel, each on a substream derived from its index,
/// and entries are assembled in grid order, so the result is independent of
/// worker count. Per-point failures are collected and reported together.
pub fn build_table(
    grid: &GridSpec,
    n: usize,
    n_sims: usize,
    beta: f64,
    rng: &RandomStream,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<SurrogateTable, TableError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(TableError::InvalidArgument(format!(
            "beta must be in (0, 1), got {beta}"
        )));
    }
    if n < 8 {
        return Err(TableError::InvalidArgument(format!(
            "table build needs n >= 8, got {n}"
        )));
    }
    if n_sims < 100 {
        return Err(TableError::InvalidArgument(format!(
            "n_sims must be >= 100, got {n_sims}"
        )));
    }
    let total = grid.point_count();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Result<SurrogateEntry, TableError>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let (log_r, sigma) = grid.point(idx);
            let mut point_rng = rng.derive(idx as u64);
            let result = (|| -> Result<SurrogateEntry, TableError> {
                let (mean_os, sums) = point_statistics(log_r, sigma, n, n_sims, &mut point_rng)?;
                let fit = fit_surrogate(&mean_os, n)?;
                let q_lo_sum_n = empirical_quantile(&sums, (1.0 - beta) / 2.0)?;
                let q_hi_sum_n = empirical_quantile(&sums, (1.0 + beta) / 2.0)?;
                let entry = SurrogateEntry {
                    log_r,
                    sigma,
                    coeffs_lower: fit.coeffs_lower,
                    coeffs_upper: fit.coeffs_upper,
                    top_two: fit.top_two,
                    q_lo_sum_n,
                    q_hi_sum_n,
                };
                entry.validate()?;
                Ok(entry)
            })()
            .map_err(|source| TableError::PointFailed {
                log_r,
                sigma,
                source: Box::new(source),
            });
            if let Some(cb) = progress {
                let finished = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                cb(finished, total);
            }
            result
        })
        .collect();

    let mut entries = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(entry) => entries.push(entry),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        let count = failures.len();
        failures.truncate(5);
        return Err(TableError::Build {
            count,
            listed: failures,
        });
    }
    Ok(SurrogateTable {
        n,
        grid: grid.clone(),
        entries,
        meta: Some(BuildMeta {
            n_sims,
            seed_key: rng.key(),
            beta,
        }),
    })
}
