use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::basis::{KnotSet, OSplineBasis};
use crate::error::{invalid, Result};
use crate::gp_exact::regular_grid;
use crate::inference::{
    aghq_fit, posterior_moments, Family, FitOptions, HyperSetting, LatentModel, ModelSpec, SmoothSpec,
};
use crate::prior::{prior_from_psd, PsdSpec};

/// Smooth representation being benchmarked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Exact,
    OSpline(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Exact => f.write_str("exact"),
            Method::OSpline(k) => write!(f, "ospline_k{k}"),
        }
    }
}

/// `y_i = √3 sin(x_i / 2) + ε_i` at `n` equally spaced points of the region.
pub fn sine_data(n: usize, region: (f64, f64), noise_sd: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let xs = if n == 1 { vec![region.1] } else { regular_grid(region.0, region.1, n - 1) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let noise = Normal::new(0.0, noise_sd).expect("positive noise SD");
    let ys = xs.iter().map(|x| sine_truth(*x, 0) + noise.sample(&mut rng)).collect();
    (xs, ys)
}

/// `q`-th derivative of `√3 sin(x / 2)`.
pub fn sine_truth(x: f64, q: usize) -> f64 {
    let amp = 3f64.sqrt() * 0.5f64.powi(q as i32);
    let phase = x / 2.0 + q as f64 * std::f64::consts::FRAC_PI_2;
    amp * phase.sin()
}

/// Gaussian model with fixed noise SD and the PSD-based prior on σ.
pub fn bench_model(
    method: Method,
    xs: &[f64],
    ys: &[f64],
    cfg: &ExperimentConfig,
    order: usize,
) -> Result<LatentModel> {
    let prior = prior_from_psd(&PsdSpec::new(cfg.psd_h, order)?, cfg.psd_u, cfg.psd_alpha)?;
    let smooth = match method {
        Method::Exact => SmoothSpec::Exact { order, region: cfg.region },
        Method::OSpline(k) => {
            SmoothSpec::OSpline(OSplineBasis::new(order, KnotSet::equal(cfg.region.0, cfg.region.1, k)?)?)
        }
    };
    let family = Family::Gaussian { noise_sd: HyperSetting::Fixed(cfg.noise_sd) };
    LatentModel::new(ModelSpec::new(xs.to_vec(), ys.to_vec(), family, smooth, prior))
}

/// One (n, method) cell of the runtime and conditioning table.
#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub n: usize,
    pub method: Method,
    /// `log10 κ_max`; `None` when the method failed.
    pub log10_max_condition: Option<f64>,
    /// Failure message, if the fit could not be completed.
    pub failure: Option<String>,
    /// Wall-clock seconds of each timed run.
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchStudy {
    pub cells: Vec<BenchCell>,
    /// Mean runtime of the smallest-k O-spline at the smallest n.
    pub reference_seconds: Option<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
    (m, var.sqrt())
}

impl BenchCell {
    pub fn mean_seconds(&self) -> Option<f64> {
        (!self.seconds.is_empty()).then(|| mean_sd(&self.seconds).0)
    }
}

impl BenchStudy {
    pub fn cell(&self, n: usize, method: Method) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.n == n && c.method == method)
    }

    /// Mean and SD of the runtimes relative to the reference cell.
    pub fn relative_runtime(&self, cell: &BenchCell) -> Option<(f64, f64)> {
        let r = self.reference_seconds?;
        if cell.seconds.is_empty() {
            return None;
        }
        let rel: Vec<f64> = cell.seconds.iter().map(|s| s / r).collect();
        Some(mean_sd(&rel))
    }

    /// Deterministic part: `n,method,log10_kmax,status`.
    pub fn write_conditioning_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "method", "log10_max_condition", "status"])?;
        for c in &self.cells {
            w.write_record(&[
                c.n.to_string(),
                c.method.to_string(),
                c.log10_max_condition.map_or("--".into(), |v| v.to_string()),
                c.failure.clone().unwrap_or_else(|| "ok".into()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Timing part: `n,method,mean_rel,sd_rel,mean_seconds`.
    pub fn write_timing_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "method", "mean_relative_runtime", "sd_relative_runtime", "mean_seconds"])?;
        for c in &self.cells {
            let (rel, sd) = match self.relative_runtime(c) {
                Some((m, s)) => (m.to_string(), s.to_string()),
                None => ("--".into(), "--".into()),
            };
            let secs = c.mean_seconds().map_or("--".into(), |v| v.to_string());
            w.write_record(&[c.n.to_string(), c.method.to_string(), rel, sd, secs])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fit_options(cfg: &ExperimentConfig, condition_numbers: bool) -> FitOptions {
    FitOptions {
        num_quad: cfg.num_quad,
        samples: if condition_numbers { 1 } else { cfg.samples },
        seed: cfg.seed,
        condition_numbers,
        ..Default::default()
    }
}

fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    std::iter::once(Method::Exact).chain(cfg.knots.iter().map(|&k| Method::OSpline(k))).collect()
}

fn run_cell(cfg: &ExperimentConfig, n: usize, method: Method) -> BenchCell {
    let order = cfg.orders[0];
    let (xs, ys) = sine_data(n, cfg.region, cfg.noise_sd, cfg.seed);
    let fail = |e: crate::Error| BenchCell {
        n,
        method,
        log10_max_condition: None,
        failure: Some(e.to_string()),
        seconds: Vec::new(),
    };
    // Conditioning from a separate, untimed fit.
    let conditioning = bench_model(method, &xs, &ys, cfg, order)
        .and_then(|m| aghq_fit(&m, &fit_options(cfg, true)))
        .map(|f| f.max_condition_number().expect("condition numbers requested").log10());
    let log10 = match conditioning {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let opts = fit_options(cfg, false);
    let timed = || -> Result<f64> {
        let start = Instant::now();
        let model = bench_model(method, &xs, &ys, cfg, order)?;
        aghq_fit(&model, &opts)?;
        Ok(start.elapsed().as_secs_f64())
    };
    let mut seconds = Vec::with_capacity(cfg.timing_runs);
    if let Err(e) = timed() {
        return fail(e);
    }
    for _ in 0..cfg.timing_runs {
        match timed() {
            Ok(s) => seconds.push(s),
            Err(e) => return fail(e),
        }
    }
    BenchCell { n, method, log10_max_condition: Some(log10), failure: None, seconds }
}

/// Runtime and maximum condition number of the exact comparator and each
/// O-spline, over every `n`. Fits run on a single thread. A comparator
/// failure is recorded in the cell rather than aborting the study.
pub fn run_benchmark_study(cfg: &ExperimentConfig) -> Result<BenchStudy> {
    if cfg.orders.len() != 1 {
        return invalid("the benchmark uses a single order");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| crate::Error::Numeric(format!("cannot build thread pool: {e}")))?;
    let cells: Vec<BenchCell> = pool.install(|| {
        cfg.n
            .iter()
            .flat_map(|&n| methods(cfg).into_iter().map(move |m| (n, m)))
            .map(|(n, m)| run_cell(cfg, n, m))
            .collect()
    });
    let n0 = *cfg.n.iter().min().expect("validated");
    let k0 = *cfg.knots.iter().min().expect("validated");
    let reference_seconds =
        cells.iter().find(|c| c.n == n0 && c.method == Method::OSpline(k0)).and_then(BenchCell::mean_seconds);
    Ok(BenchStudy { cells, reference_seconds })
}

/// Posterior mean and SD of `g^{(q)}` on a grid, for one method.
#[derive(Debug, Clone, Serialize)]
pub struct CurveSet {
    pub method: Method,
    pub q: usize,
    pub xs: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Fit the exact comparator and every O-spline to the same `n`-point data
/// set and report analytic posterior moments for `q < p` on `grid` points.
pub fn compare_with_exact(cfg: &ExperimentConfig, n: usize, grid: usize) -> Result<Vec<CurveSet>> {
    let order = cfg.orders[0];
    let (xs, ys) = sine_data(n, cfg.region, cfg.noise_sd, cfg.seed);
    let at = regular_grid(cfg.region.0, cfg.region.1, grid - 1);
    let opts = FitOptions { num_quad: cfg.num_quad, samples: 1, seed: cfg.seed, ..Default::default() };
    let mut out = Vec::new();
    for method in methods(cfg) {
        let fit = aghq_fit(&bench_model(method, &xs, &ys, cfg, order)?, &opts)?;
        for q in 0..order {
            let (mean, sd) = posterior_moments(&fit, &at, q)?;
            out.push(CurveSet { method, q, xs: at.clone(), mean, sd });
        }
    }
    Ok(out)
}

pub fn write_curve_sets_csv<W: Write>(out: W, sets: &[CurveSet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "q", "x", "truth", "mean", "sd"])?;
    for s in sets {
        for i in 0..s.xs.len() {
            w.write_record(&[
                s.method.to_string(),
                s.q.to_string(),
                s.xs[i].to_string(),
                sine_truth(s.xs[i], s.q).to_string(),
                s.mean[i].to_string(),
                s.sd[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
