use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ospline_core::gp_exact::regular_grid;
use ospline_core::inference::{
    fixed_effect_summary, sum_coded_design, summarize_draws, write_curves_csv, EffectSummary, Family, FitSummary,
    HyperSetting, SmoothSpec, Transform,
};
use ospline_core::nalgebra::DMatrix;
use ospline_core::{
    aghq_fit, posterior_function, prior_from_psd, ExponentialPrior, FitOptions, KnotSet, LatentModel, ModelSpec,
    OSplineBasis, PriorTarget, PsdSpec,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::DataTable;
use crate::{thread_pool, Failure};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyArg {
    Gaussian,
    Poisson,
    PoissonOd,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 30)]
    pub knots: usize,
    /// Region `a,b`; defaults to the range of x.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub region: Option<Vec<f64>>,
    #[arg(long)]
    pub psd_h: f64,
    #[arg(long, conflicts_with = "psd_median", requires = "psd_alpha")]
    pub psd_u: Option<f64>,
    #[arg(long, conflicts_with = "psd_median", requires = "psd_u")]
    pub psd_alpha: Option<f64>,
    /// Prior median of the predictive SD (α = 0.5).
    #[arg(long)]
    pub psd_median: Option<f64>,
    /// Categorical columns entered as sum-coded fixed effects.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<String>,
    /// Fixed Gaussian noise SD; estimated when absent.
    #[arg(long, conflicts_with = "noise_median")]
    pub noise_sd: Option<f64>,
    /// Prior median of the Gaussian noise SD when estimated.
    #[arg(long, default_value_t = 1.0)]
    pub noise_median: f64,
    /// Fixed overdispersion SD; estimated when absent.
    #[arg(long, conflicts_with = "od_median")]
    pub od_sd: Option<f64>,
    /// Prior median of the overdispersion SD when estimated.
    #[arg(long, default_value_t = 0.1)]
    pub od_median: f64,
    #[arg(long, default_value_t = 10)]
    pub quad: usize,
    #[arg(long, default_value_t = 3000)]
    pub samples: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub deriv: Vec<usize>,
    /// Equally spaced output intervals over the region.
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report exp(g) and g'·exp(g).
    #[arg(long)]
    pub exp_transform: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Serialize)]
struct FitManifest<'a> {
    command: &'static str,
    version: &'static str,
    data_sha256: String,
    arguments: &'a FitArgs,
    outputs: Vec<String>,
    summary: FitSummary,
}

fn sigma_prior(args: &FitArgs) -> Result<ExponentialPrior, Failure> {
    let spec = PsdSpec::new(args.psd_h, args.order)?;
    let (u, alpha) = match (args.psd_u, args.psd_alpha, args.psd_median) {
        (Some(u), Some(a), None) => (u, a),
        (None, None, Some(m)) => (m, 0.5),
        _ => return Err(Failure::Usage("give --psd-u with --psd-alpha, or --psd-median".into())),
    };
    Ok(prior_from_psd(&spec, u, alpha)?)
}

fn hyper(fixed: Option<f64>, median: f64) -> Result<HyperSetting, Failure> {
    Ok(match fixed {
        Some(v) => HyperSetting::Fixed(v),
        None => HyperSetting::Estimated(ExponentialPrior::with_median(median, PriorTarget::Sigma)?),
    })
}

/// Sum-coded fixed-effect design plus, per column, its coefficient range and
/// reference level.
type FixedEffects = (DMatrix<f64>, Vec<String>, Vec<(usize, usize, String)>);

fn fixed_effects(table: &DataTable, columns: &[String]) -> Result<Option<FixedEffects>, Failure> {
    if columns.is_empty() {
        return Ok(None);
    }
    let mut blocks = Vec::new();
    let mut names = Vec::new();
    let mut references = Vec::new();
    for col in columns {
        let labels = table.labels(col)?;
        let (design, levels) = sum_coded_design(&labels).map_err(|e| Failure::Data(format!("column '{col}': {e}")))?;
        let start = names.len();
        names.extend(levels[..levels.len() - 1].iter().map(|l| format!("{col}={l}")));
        references.push((start, names.len(), format!("{col}={}", levels[levels.len() - 1])));
        blocks.push(design);
    }
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut design = DMatrix::zeros(table.len(), cols);
    let mut at = 0;
    for b in &blocks {
        design.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    Ok(Some((design, names, references)))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn run(args: FitArgs) -> Result<(), Failure> {
    if let Some(&q) = args.deriv.iter().find(|&&q| q >= args.order) {
        return Err(Failure::Usage(format!("derivative order {q} must be below the order {}", args.order)));
    }
    let prior = sigma_prior(&args)?;
    let family = match args.family {
        FamilyArg::Gaussian => Family::Gaussian { noise_sd: hyper(args.noise_sd, args.noise_median)? },
        FamilyArg::Poisson => Family::Poisson,
        FamilyArg::PoissonOd => Family::PoissonOverdispersed { overdispersion_sd: hyper(args.od_sd, args.od_median)? },
    };
    let raw = std::fs::read(&args.data).map_err(|e| Failure::Data(format!("{}: {e}", args.data.display())))?;
    let table = DataTable::read(&args.data)?;
    let xs = table.numeric(&args.x)?;
    let ys = table.numeric(&args.y)?;
    let (a, b) = match &args.region {
        Some(r) => (r[0], r[1]),
        None => xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
    };
    if !(b > a) {
        return Err(Failure::Data(format!("region [{a}, {b}] is empty; x needs at least two distinct values")));
    }
    let basis = OSplineBasis::new(args.order, KnotSet::equal(a, b, args.knots)?)?;
    let mut spec = ModelSpec::new(xs, ys, family, SmoothSpec::OSpline(basis), prior);
    let fixed = fixed_effects(&table, &args.fixed)?;
    let mut references = Vec::new();
    if let Some((design, names, refs)) = fixed {
        spec.fixed_design = Some(design);
        spec.fixed_names = names;
        references = refs;
    }
    let model = LatentModel::new(spec)?;
    let opts = FitOptions { num_quad: args.quad, samples: args.samples, seed: args.seed, ..Default::default() };

    std::fs::create_dir_all(&args.out)?;
    let grid = regular_grid(a, b, args.grid.max(1));
    let mut outputs = Vec::new();
    let fit = thread_pool(args.threads)?.install(|| -> Result<_, Failure> {
        let fit = aghq_fit(&model, &opts)?;
        for &q in &args.deriv {
            let curve = posterior_function(&fit, &grid, q, Transform::Identity)?;
            let name = format!("curves_q{q}.csv");
            write_curves_csv(create(&args.out, &name)?, &[curve])?;
            outputs.push(name);
            if args.exp_transform && q <= 1 {
                let curve = posterior_function(&fit, &grid, q, Transform::Exp)?;
                let name = format!("curves_exp_q{q}.csv");
                write_curves_csv(create(&args.out, &name)?, &[curve])?;
                outputs.push(name);
            }
        }
        Ok(fit)
    })?;

    let psd_spec = PsdSpec::new(args.psd_h, args.order)?;
    let mut w = csv::Writer::from_writer(create(&args.out, "hyperparameters.csv")?);
    let mut header: Vec<String> = (0..model.theta_dim()).map(|i| format!("theta{i}")).collect();
    header.extend(["sigma", "psd", "family_hyperparameter", "weight", "log_posterior"].map(String::from));
    w.write_record(&header)?;
    for p in &fit.points {
        let sigma = model.sigma(&p.theta);
        let mut rec: Vec<String> = p.theta.iter().map(f64::to_string).collect();
        rec.push(sigma.to_string());
        rec.push(psd_spec.sigma_to_psd(sigma).to_string());
        rec.push(model.family_value(&p.theta).map_or(String::new(), |v| v.to_string()));
        rec.push(p.weight.to_string());
        rec.push(p.log_posterior.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    outputs.push("hyperparameters.csv".into());

    if !references.is_empty() {
        let mut effects = fixed_effect_summary(&fit, None);
        let off = model.fixed_offset();
        for (start, end, name) in &references {
            let mut v: Vec<f64> =
                (0..fit.num_samples()).map(|c| -fit.samples.column(c).rows(off + start, end - start).sum()).collect();
            effects.push(summarize_draws(name.clone(), &mut v));
        }
        write_effects(create(&args.out, "fixed_effects.csv")?, &effects)?;
        outputs.push("fixed_effects.csv".into());
    }

    let manifest = FitManifest {
        command: "fit",
        version: env!("CARGO_PKG_VERSION"),
        data_sha256: Sha256::digest(&raw).iter().map(|b| format!("{b:02x}")).collect(),
        arguments: &args,
        outputs,
        summary: fit.summary(),
    };
    serde_json::to_writer_pretty(create(&args.out, "manifest.json")?, &manifest)?;
    for f in &manifest.outputs {
        println!("{}", args.out.join(f).display());
    }
    Ok(())
}

fn write_effects<W: std::io::Write>(out: W, effects: &[EffectSummary]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    for e in effects {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
