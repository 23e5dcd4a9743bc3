//! Command-line front end: build surrogate tables, simulate series, scan the
//! approximation region, and calibrate coverage.
//!
//! Exit codes: 0 success, 2 validation failure, 3 compute failure, 4 scan
//! completed with an empty approximation region.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ricker_core::model::{simulate_series, ObservationSeries, Theta};
use ricker_core::region::{
    calibrate_alpha, scan_region, AssessOptions, RegionResult, DEFAULT_NU,
};
use ricker_core::rng::RandomStream;
use ricker_core::stats::DEFAULT_DELTA;
use ricker_core::tables::{
    build_table, GridSpec, SurrogateTable, DEFAULT_GRID_SIZE, DEFAULT_TABLE_SIMS,
};
use ricker_core::DEFAULT_BETA;

const EXIT_EMPTY_REGION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ricker",
    version,
    about = "Adequacy analysis for the stochastic Ricker model"
)]
struct Cli {
    /// Worker threads (default: RICKER_WORKERS env var, else all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a surrogate table over a (log r, sigma) grid
    Tables(TablesArgs),
    /// Simulate one observed count series
    Simulate(SimulateArgs),
    /// Scan the approximation region for a data series
    Analyze(AnalyzeArgs),
    /// Estimate the covering probability and the recalibrated level
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct TablesArgs {
    /// Series length the table is built for
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Grid points per axis
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    /// Simulations per grid point
    #[arg(long, default_value_t = DEFAULT_TABLE_SIMS)]
    sims: usize,
    /// Level of the stored sum-N quantiles
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// RNG seed; drawn from system entropy (and logged) when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Custom grid box: smallest log r (requires the other three bounds)
    #[arg(long, requires_all = ["logr_max", "sigma_min", "sigma_max"])]
    logr_min: Option<f64>,
    /// Custom grid box: largest log r
    #[arg(long, requires_all = ["logr_min", "sigma_min", "sigma_max"])]
    logr_max: Option<f64>,
    /// Custom grid box: smallest sigma
    #[arg(long, requires_all = ["logr_min", "logr_max", "sigma_max"])]
    sigma_min: Option<f64>,
    /// Custom grid box: largest sigma
    #[arg(long, requires_all = ["logr_min", "logr_max", "sigma_min"])]
    sigma_max: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// log r
    #[arg(long)]
    logr: f64,
    /// Innovation standard deviation
    #[arg(long)]
    sigma: f64,
    /// Observation scale
    #[arg(long)]
    phi: f64,
    /// Series length
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// RNG seed; drawn from system entropy (and logged) when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Output path, one count per line
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MahaChoice {
    Classical,
    Kt,
    Both,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Data series file, one count per line
    #[arg(long)]
    data: PathBuf,
    /// Surrogate table CSV
    #[arg(long)]
    table: PathBuf,
    /// Typicality level
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Simulations per assessed theta
    #[arg(long, default_value_t = 3000)]
    sims: usize,
    /// Level for the phi approximation interval (match the table build)
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Offset inside the dynamics-regression logs
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// RNG seed; drawn from system entropy (and logged) when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    /// Also write <prefix>_logr.csv, _sigma.csv, _phi.csv with min-p pairs
    #[arg(long)]
    plotdata: Option<PathBuf>,
    /// Append Mahalanobis p-value column(s)
    #[arg(long, value_enum)]
    maha: Option<MahaChoice>,
    /// Degrees of freedom for the Kent-Tyler variant
    #[arg(long, default_value_t = DEFAULT_NU)]
    maha_nu: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    /// log r
    #[arg(long)]
    logr: f64,
    /// Innovation standard deviation
    #[arg(long)]
    sigma: f64,
    /// Observation scale
    #[arg(long)]
    phi: f64,
    /// Nominal typicality level
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Outer replications (simulated datasets)
    #[arg(long, default_value_t = 3000)]
    outer: usize,
    /// Inner simulations per assessment
    #[arg(long, default_value_t = 500)]
    inner: usize,
    /// Series length
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Offset inside the dynamics-regression logs
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// RNG seed; drawn from system entropy (and logged) when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Take the surrogate entry from this table instead of building one
    #[arg(long)]
    table: Option<PathBuf>,
    /// Simulations for the on-the-fly surrogate entry
    #[arg(long, default_value_t = DEFAULT_TABLE_SIMS)]
    surrogate_sims: usize,
}

enum CliError {
    Validation(String),
    Compute(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Compute(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Compute(m) => m,
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn compute(err: impl std::fmt::Display) -> CliError {
    CliError::Compute(err.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match resolve_workers(cli.workers) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.code());
        }
    };
    let run = || dispatch(cli.command);
    let result = match workers {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(CliError::Compute(format!("worker pool: {e}"))),
        },
        None => run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(w) = flag {
        if w == 0 {
            return Err(validation("--workers must be >= 1"));
        }
        return Ok(Some(w));
    }
    match std::env::var("RICKER_WORKERS") {
        Ok(raw) => {
            let w: usize = raw
                .parse()
                .map_err(|_| validation(format!("RICKER_WORKERS must be a positive integer, got {raw:?}")))?;
            if w == 0 {
                return Err(validation("RICKER_WORKERS must be >= 1"));
            }
            Ok(Some(w))
        }
        Err(_) => Ok(None),
    }
}

fn dispatch(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Tables(args) => cmd_tables(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Calibrate(args) => cmd_calibrate(args),
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed: {s} (drawn from system entropy; pass --seed {s} to replay)");
            s
        }
    }
}

fn check_out_path(path: &Path) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        if !dir.is_dir() {
            return Err(validation(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn check_unit_interval(name: &str, value: f64) -> Result<(), CliError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(validation(format!(
            "--{name} must be strictly between 0 and 1, got {value}"
        )))
    }
}

fn cmd_tables(args: TablesArgs) -> Result<ExitCode, CliError> {
    if args.n < 8 {
        return Err(validation(format!("--n must be >= 8, got {}", args.n)));
    }
    if args.sims < 100 {
        return Err(validation(format!("--sims must be >= 100, got {}", args.sims)));
    }
    check_unit_interval("beta", args.beta)?;
    check_out_path(&args.out)?;
    let grid = match (args.logr_min, args.logr_max, args.sigma_min, args.sigma_max) {
        (Some(lr_min), Some(lr_max), Some(s_min), Some(s_max)) => {
            GridSpec::from_ranges((lr_min, lr_max), (s_min, s_max), args.grid)
                .map_err(|e| validation(e.to_string()))?
        }
        _ => GridSpec::formula(args.grid).map_err(|e| validation(e.to_string()))?,
    };

    let seed = resolve_seed(args.seed);
    let rng = RandomStream::from_seed(seed);
    let started = Instant::now();
    let progress = |done: usize, total: usize| {
        eprintln!("[{done}/{total}] grid points done");
    };
    let table = build_table(&grid, args.n, args.sims, args.beta, &rng, Some(&progress))
        .map_err(compute)?;
    table.write_csv(&args.out).map_err(compute)?;
    println!(
        "wrote {} rows (n = {}, {} sims per point) to {} in {:.1?}",
        table.entries().len(),
        table.n(),
        args.sims,
        args.out.display(),
        started.elapsed()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, CliError> {
    let theta = Theta::new(args.logr, args.sigma, args.phi)
        .map_err(|e| validation(e.to_string()))?;
    if args.n == 0 {
        return Err(validation("--n must be >= 1"));
    }
    check_out_path(&args.out)?;
    let seed = resolve_seed(args.seed);
    let rng = RandomStream::from_seed(seed);
    let series = simulate_series(&theta, args.n, &rng).map_err(compute)?;
    series.write_to(&args.out).map_err(compute)?;
    println!(
        "wrote {} counts (total {}) to {}",
        series.len(),
        series.total(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

type ThetaComponent = fn(&Theta) -> f64;

fn write_plot_data(result: &RegionResult, prefix: &Path) -> Result<(), CliError> {
    use std::io::Write;
    let specs: [(&str, &str, ThetaComponent); 3] = [
        ("logr", "log_r", |t| t.log_r()),
        ("sigma", "sigma", |t| t.sigma()),
        ("phi", "phi", |t| t.phi()),
    ];
    for (suffix, header, pick) in specs {
        let path = prefix.with_file_name(format!(
            "{}_{suffix}.csv",
            prefix
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "plot".into())
        ));
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(compute)?,
        );
        writeln!(w, "{header},min_p").map_err(compute)?;
        for r in &result.reports {
            writeln!(w, "{},{}", pick(&r.theta), r.min_p).map_err(compute)?;
        }
        w.flush().map_err(compute)?;
        eprintln!("plot data: {}", path.display());
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, CliError> {
    check_unit_interval("alpha", args.alpha)?;
    check_unit_interval("beta", args.beta)?;
    if args.sims < 100 {
        return Err(validation(format!("--sims must be >= 100, got {}", args.sims)));
    }
    if args.delta.is_nan() || args.delta <= 0.0 {
        return Err(validation(format!("--delta must be > 0, got {}", args.delta)));
    }
    if args.maha_nu.is_nan() || args.maha_nu <= 0.0 {
        return Err(validation(format!("--maha-nu must be > 0, got {}", args.maha_nu)));
    }
    check_out_path(&args.out)?;
    if let Some(prefix) = &args.plotdata {
        check_out_path(prefix)?;
    }
    let data = ObservationSeries::read_from(&args.data)
        .map_err(|e| validation(format!("data file {}: {e}", args.data.display())))?;
    let table = SurrogateTable::read_csv(&args.table)
        .map_err(|e| validation(format!("table file {}: {e}", args.table.display())))?;
    if data.len() != table.n() {
        return Err(validation(format!(
            "data length {} does not match table series length {}",
            data.len(),
            table.n()
        )));
    }

    let seed = resolve_seed(args.seed);
    let rng = RandomStream::from_seed(seed);
    let mut opts = AssessOptions::new(args.alpha, args.sims, args.delta);
    match args.maha {
        Some(MahaChoice::Classical) => opts.maha_classical = true,
        Some(MahaChoice::Kt) => opts.maha_kent_tyler = Some(args.maha_nu),
        Some(MahaChoice::Both) => {
            opts.maha_classical = true;
            opts.maha_kent_tyler = Some(args.maha_nu);
        }
        None => {}
    }

    let started = Instant::now();
    let result = scan_region(&data, &table, &opts, args.beta, &rng).map_err(compute)?;
    result.write_csv(&args.out).map_err(compute)?;
    if let Some(prefix) = &args.plotdata {
        write_plot_data(&result, prefix)?;
    }

    if !result.failures.is_empty() {
        eprintln!(
            "{} of {} scan units could not be assessed:",
            result.failures.len(),
            result.failures.len() + result.reports.len()
        );
        for f in result.failures.iter().take(5) {
            match f.phi {
                Some(phi) => eprintln!(
                    "  log_r={} sigma={} phi={}: {}",
                    f.log_r, f.sigma, phi, f.message
                ),
                None => eprintln!("  log_r={} sigma={}: {}", f.log_r, f.sigma, f.message),
            }
        }
        if result.failures.len() > 5 {
            eprintln!("  ... and {} more", result.failures.len() - 5);
        }
    }

    println!(
        "assessed {} parameter triples ({} adequate) in {:.1?}; report: {}",
        result.reports.len(),
        result.adequate().count(),
        started.elapsed(),
        args.out.display()
    );
    match result.best() {
        Some(best) => println!(
            "best theta: log_r={} sigma={} phi={} with min_p={}{}",
            best.theta.log_r(),
            best.theta.sigma(),
            best.theta.phi(),
            best.min_p,
            if best.adequate { "" } else { " (not adequate)" }
        ),
        None => println!("no parameter triple could be assessed"),
    }
    if result.is_empty_region() {
        println!("approximation region is empty: no theta is an adequate approximation");
        return Ok(ExitCode::from(EXIT_EMPTY_REGION));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<ExitCode, CliError> {
    let theta = Theta::new(args.logr, args.sigma, args.phi)
        .map_err(|e| validation(e.to_string()))?;
    check_unit_interval("alpha", args.alpha)?;
    if args.outer < 500 {
        return Err(validation(format!("--outer must be >= 500, got {}", args.outer)));
    }
    if args.inner < 100 {
        return Err(validation(format!("--inner must be >= 100, got {}", args.inner)));
    }
    if args.n < 8 {
        return Err(validation(format!("--n must be >= 8, got {}", args.n)));
    }
    if args.delta.is_nan() || args.delta <= 0.0 {
        return Err(validation(format!("--delta must be > 0, got {}", args.delta)));
    }
    if args.surrogate_sims < 100 {
        return Err(validation(format!(
            "--surrogate-sims must be >= 100, got {}",
            args.surrogate_sims
        )));
    }

    let seed = resolve_seed(args.seed);
    let rng = RandomStream::from_seed(seed);
    let started = Instant::now();
    let entry = match &args.table {
        Some(path) => {
            let table = SurrogateTable::read_csv(path)
                .map_err(|e| validation(format!("table file {}: {e}", path.display())))?;
            if table.n() != args.n {
                return Err(validation(format!(
                    "table series length {} does not match --n {}",
                    table.n(),
                    args.n
                )));
            }
            table
                .nearest_entry(args.logr, args.sigma)
                .map_err(|e| validation(e.to_string()))?
                .clone()
        }
        None => {
            eprintln!(
                "building surrogate entry at (log_r={}, sigma={}) with {} sims",
                args.logr, args.sigma, args.surrogate_sims
            );
            let grid = GridSpec::from_values(vec![args.logr], vec![args.sigma])
                .map_err(|e| validation(e.to_string()))?;
            let table = build_table(
                &grid,
                args.n,
                args.surrogate_sims,
                DEFAULT_BETA,
                &rng.derive(u64::MAX),
                None,
            )
            .map_err(compute)?;
            table.entries()[0].clone()
        }
    };

    let (alpha_star, alpha_tilde) = calibrate_alpha(
        &theta,
        &entry,
        args.n,
        args.alpha,
        args.outer,
        args.inner,
        args.delta,
        &rng,
    )
    .map_err(compute)?;
    println!("alpha       = {}", args.alpha);
    println!("alpha_star  = {alpha_star}");
    println!("alpha_tilde = {alpha_tilde}");
    eprintln!(
        "{} outer replications x {} inner sims in {:.1?}",
        args.outer,
        args.inner,
        started.elapsed()
    );
    Ok(ExitCode::SUCCESS)
}
