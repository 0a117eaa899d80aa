mod data;
mod fit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use ospline_core::gp_exact::regular_grid;
use ospline_core::simbench::{run_experiment, ExperimentConfig, ExperimentId, Profile};
use ospline_core::{prior_from_psd, CovGrid, IwpKernel, KnotSet, OSplineBasis, PsdSpec};

/// O-spline smoothing with joint inference for a function and its derivatives.
#[derive(Parser)]
#[command(name = "ospline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a smoothing model to CSV data.
    Fit(Box<fit::FitArgs>),
    /// Compare exact and O-spline covariances on a grid.
    CovCompare(CovCompareArgs),
    /// Convert between σ and the h-unit predictive SD.
    Psd(PsdArgs),
    /// Run one of the simulation studies.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct CovCompareArgs {
    #[arg(long)]
    order: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    knots_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 1.0])]
    region: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    q1: usize,
    #[arg(long, default_value_t = 0)]
    q2: usize,
    /// Grid intervals per axis.
    #[arg(long, default_value_t = 200)]
    grid: usize,
    /// Directory for one `cov_k{k}.csv` per knot count.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("value").required(true).args(["sigma", "psd"])))]
struct PsdArgs {
    #[arg(long)]
    order: usize,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    psd: Option<f64>,
    #[arg(long, requires = "alpha")]
    u: Option<f64>,
    #[arg(long, requires = "u")]
    alpha: Option<f64>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    experiment: ExperimentId,
    /// Overrides applied on top of the bundled profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ci")]
    profile: ProfileArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Ci,
    Full,
}

/// Failure categories, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ospline_core::Error> for Failure {
    fn from(e: ospline_core::Error) -> Self {
        use ospline_core::Error as E;
        match e {
            E::InvalidArgument(_) => Failure::Usage(e.to_string()),
            E::Numeric(_) | E::Iteration { .. } => Failure::Numeric(e.to_string()),
            E::Data(_) | E::Io(_) | E::Csv(_) | E::Json(_) => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Numeric(format!("cannot start thread pool: {e}")))
}

fn cov_compare(args: CovCompareArgs) -> Result<(), Failure> {
    let (a, b) = (args.region[0], args.region[1]);
    let kernel = IwpKernel::with_origin(args.order, 1.0, a)?;
    let grid = regular_grid(a, b, args.grid);
    std::fs::create_dir_all(&args.out)?;
    let mut previous: Option<(usize, f64)> = None;
    for &k in &args.knots_list {
        let basis = OSplineBasis::new(args.order, KnotSet::equal(a, b, k)?)?;
        let cg = CovGrid::compare(&kernel, &basis, &grid, &grid, args.q1, args.q2)?;
        let path = args.out.join(format!("cov_k{k}.csv"));
        cg.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        let sup = cg.sup_error().expect("comparison grid");
        let bound = 2.0 / k as f64;
        let mut line = format!(
            "p={} k={k} q1={} q2={} sup_error={sup:.6e} bound_2_over_k={bound:.6e} within_bound={}",
            args.order,
            args.q1,
            args.q2,
            sup <= bound + 1e-9
        );
        if let Some((k0, e0)) = previous {
            line.push_str(&format!(" ratio_vs_k{k0}={:.4}", e0 / sup));
        }
        println!("{line}");
        previous = Some((k, sup));
    }
    Ok(())
}

fn psd(args: PsdArgs) -> Result<(), Failure> {
    let spec = PsdSpec::new(args.h, args.order)?;
    match (args.sigma, args.psd) {
        (Some(s), None) => println!("psd = {}", spec.sigma_to_psd(s)),
        (None, Some(v)) => println!("sigma = {}", spec.psd_to_sigma(v)),
        _ => return Err(Failure::Usage("give exactly one of --sigma and --psd".into())),
    }
    if let (Some(u), Some(alpha)) = (args.u, args.alpha) {
        let prior = prior_from_psd(&spec, u, alpha)?;
        println!("sigma_rate = {}", prior.rate);
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<(), Failure> {
    let profile = match args.profile {
        ProfileArg::Ci => Profile::Ci,
        ProfileArg::Full => Profile::Full,
    };
    let base = ExperimentConfig::defaults(args.experiment, profile);
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, Some(&base)).map_err(|e| match e {
            ospline_core::Error::Io(io) => Failure::Data(format!("{}: {io}", path.display())),
            other => Failure::Data(other.to_string()),
        })?,
        None => base,
    };
    if cfg.experiment != args.experiment {
        return Err(Failure::Usage(format!(
            "config is for experiment '{}' but '{}' was requested",
            cfg.experiment, args.experiment
        )));
    }
    let manifest = thread_pool(args.threads)?.install(|| run_experiment(&cfg, &args.out))?;
    for f in manifest.outputs.iter().chain(&manifest.timing_outputs) {
        println!("{}", args.out.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Fit(a) => fit::run(*a),
        Command::CovCompare(a) => cov_compare(a),
        Command::Psd(a) => psd(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
