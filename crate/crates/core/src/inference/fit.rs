use std::io::Write;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::mode::{assemble_precision, condition_number, laplace_from, newton_mode, GaussianApprox, NewtonSettings};
use super::model::{LatentModel, SmoothTerm};
use crate::aghq::{build_grid_with, OptimizerSettings};
use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Gauss–Hermite points per hyperparameter dimension.
    pub num_quad: usize,
    /// Number of posterior samples `M`.
    pub samples: usize,
    pub seed: u64,
    /// Compute the condition number of `H(θ)` at every grid point.
    pub condition_numbers: bool,
    pub newton: NewtonSettings,
    pub optimizer: OptimizerSettings,
    /// Starting θ for the optimizer; prior medians when absent.
    pub theta_init: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            num_quad: 10,
            samples: 3000,
            seed: 1,
            condition_numbers: false,
            newton: NewtonSettings::default(),
            optimizer: OptimizerSettings::default(),
            theta_init: None,
        }
    }
}

/// One hyperparameter grid point with its Gaussian approximation.
#[derive(Debug, Clone)]
pub struct QuadPoint {
    pub theta: Vec<f64>,
    /// Normalized posterior weight.
    pub weight: f64,
    /// Laplace log posterior `log π̃(θ, Y)` (unnormalized).
    pub log_posterior: f64,
    pub approx: GaussianApprox,
    pub condition_number: Option<f64>,
}

/// Posterior from [`aghq_fit`] or [`fit_fixed_theta`].
///
/// Samples hold the core block `(w, γ, β)` only, one column per draw,
/// grouped by the grid point they were drawn from.
#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub model: LatentModel,
    pub points: Vec<QuadPoint>,
    /// Estimate of `log π(Y)`; `None` for fixed-θ fits.
    pub log_marginal: Option<f64>,
    pub theta_mode: Vec<f64>,
    pub seed: u64,
    pub num_quad: usize,
    pub samples: DMatrix<f64>,
    /// Grid point index of each sample column.
    pub sample_point: Vec<usize>,
}

impl PosteriorFit {
    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    /// Largest condition number over the grid, when computed.
    pub fn max_condition_number(&self) -> Option<f64> {
        self.points.iter().map(|p| p.condition_number).try_fold(f64::NEG_INFINITY, |acc, c| c.map(|c| acc.max(c)))
    }

    /// σ for each sample column.
    pub fn sample_sigmas(&self) -> Vec<f64> {
        self.sample_point.iter().map(|&j| self.model.sigma(&self.points[j].theta)).collect()
    }
}

/// Largest condition number of `H(θ)` over the grid points.
pub fn max_condition_number(fit: &PosteriorFit) -> Option<f64> {
    fit.max_condition_number()
}

fn check_options(model: &LatentModel, opts: &FitOptions) -> Result<()> {
    if opts.num_quad == 0 {
        return invalid("number of quadrature points must be at least one");
    }
    if opts.samples == 0 {
        return invalid("number of posterior samples must be at least one");
    }
    if model.theta_dim() > 2 {
        return invalid("at most two hyperparameters are supported");
    }
    Ok(())
}

fn point(
    model: &LatentModel,
    theta: &[f64],
    init: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<(f64, QuadPoint)> {
    let approx = newton_mode(model, theta, init, opts.newton)?;
    let log_posterior = laplace_from(&approx);
    let condition_number = if opts.condition_numbers {
        Some(condition_number(&assemble_precision(model, &approx.mode, theta)?))
    } else {
        None
    };
    Ok((log_posterior, QuadPoint { theta: theta.to_vec(), weight: 0.0, log_posterior, approx, condition_number }))
}

/// Fit by adaptive Gauss–Hermite quadrature over the log-scale
/// hyperparameters.
///
/// The Laplace log posterior is maximized over θ, a `num_quad^d` grid is
/// placed at the mode and scaled by the curvature, and `M` latent draws are
/// taken from the mixture of per-point Gaussian approximations. With an even
/// `num_quad` the grid does not contain the mode.
pub fn aghq_fit(model: &LatentModel, opts: &FitOptions) -> Result<PosteriorFit> {
    check_options(model, opts)?;
    let init = match &opts.theta_init {
        Some(t) => {
            model.check_theta(t)?;
            t.clone()
        }
        None => model.default_theta(),
    };
    // Newton restarts from the most recent mode; grid nodes start from the
    // mode at θ̂, which the optimizer evaluates last.
    let warm: Mutex<Option<DVector<f64>>> = Mutex::new(None);
    let objective = |theta: &[f64]| -> Result<f64> {
        let start = warm.lock().expect("warm start").clone();
        let approx = newton_mode(model, theta, start.as_ref(), opts.newton)
            .or_else(|_| newton_mode(model, theta, None, opts.newton))?;
        let v = laplace_from(&approx);
        *warm.lock().expect("warm start") = Some(approx.mode);
        Ok(v)
    };
    let eval = |theta: &[f64]| {
        let start = warm.lock().expect("warm start").clone();
        point(model, theta, start.as_ref(), opts).or_else(|_| point(model, theta, None, opts))
    };
    let (grid, points) = build_grid_with(objective, eval, &init, opts.num_quad, opts.optimizer)?;
    let mut points = points;
    for (p, node) in points.iter_mut().zip(&grid.nodes) {
        p.weight = node.weight;
    }
    let (samples, sample_point) = draw(&points, opts.samples, opts.seed);
    Ok(PosteriorFit {
        model: model.clone(),
        points,
        log_marginal: Some(grid.log_normalizer),
        theta_mode: grid.mode,
        seed: opts.seed,
        num_quad: opts.num_quad,
        samples,
        sample_point,
    })
}

/// Fit with θ held fixed (a degenerate hyperprior).
pub fn fit_fixed_theta(model: &LatentModel, theta: &[f64], opts: &FitOptions) -> Result<PosteriorFit> {
    check_options(model, opts)?;
    model.check_theta(theta)?;
    let (_, mut p) = point(model, theta, None, opts)?;
    p.weight = 1.0;
    let points = vec![p];
    let (samples, sample_point) = draw(&points, opts.samples, opts.seed);
    Ok(PosteriorFit {
        model: model.clone(),
        points,
        log_marginal: None,
        theta_mode: theta.to_vec(),
        seed: opts.seed,
        num_quad: 1,
        samples,
        sample_point,
    })
}

/// Allocate `m` draws to grid points by weight, then sample each point's
/// Gaussian from its own stream so results do not depend on thread count.
fn draw(points: &[QuadPoint], m: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; points.len()];
    let cumulative: Vec<f64> = points
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.weight;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("at least one point");
    for _ in 0..m {
        let u = rng.random::<f64>() * total;
        let j = cumulative.partition_point(|&c| c <= u).min(points.len() - 1);
        counts[j] += 1;
    }
    let blocks: Vec<DMatrix<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64 + 1);
            let dim = p.approx.core_chol.l_dirty().nrows();
            let z = DMatrix::from_fn(dim, counts[j], |_, _| rng.sample::<f64, _>(StandardNormal));
            let l = p.approx.core_chol.l();
            let mut x = l.tr_solve_lower_triangular(&z).expect("Cholesky factor is nonsingular");
            let mu = p.approx.core_mode();
            for mut col in x.column_iter_mut() {
                col += &mu;
            }
            x
        })
        .collect();
    let dim = blocks[0].nrows();
    let mut samples = DMatrix::zeros(dim, m);
    let mut sample_point = Vec::with_capacity(m);
    let mut col = 0;
    for (j, b) in blocks.iter().enumerate() {
        samples.columns_mut(col, b.ncols()).copy_from(b);
        col += b.ncols();
        sample_point.extend(std::iter::repeat_n(j, b.ncols()));
    }
    (samples, sample_point)
}

/// Posterior summary of a scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Mean, SD and 95% order-statistic interval of a set of draws.
pub fn summarize_draws(name: String, values: &mut [f64]) -> EffectSummary {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    values.sort_by(f64::total_cmp);
    EffectSummary { name, mean, sd: var.sqrt(), lower: quantile(values, 0.025), upper: quantile(values, 0.975) }
}

/// Order-statistic quantile (no interpolation), so that monotone
/// transformations commute with it.
pub(crate) fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    let rank = ((prob * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Summaries of the fixed effects. With `reference` set, a final entry for
/// the sum-coded reference level (minus the sum of the coefficients) is
/// appended under that name.
pub fn fixed_effect_summary(fit: &PosteriorFit, reference: Option<&str>) -> Vec<EffectSummary> {
    let off = fit.model.fixed_offset();
    let r = fit.model.fixed_prior_sd.len();
    let mut out: Vec<EffectSummary> = (0..r)
        .map(|j| {
            let mut v: Vec<f64> = fit.samples.row(off + j).iter().copied().collect();
            summarize_draws(fit.model.fixed_names[j].clone(), &mut v)
        })
        .collect();
    if let (Some(name), true) = (reference, r > 0) {
        let mut v: Vec<f64> = (0..fit.num_samples()).map(|c| -fit.samples.column(c).rows(off, r).sum()).collect();
        out.push(summarize_draws(name.to_string(), &mut v));
    }
    out
}

/// One grid point in the serialized summary.
#[derive(Debug, Clone, Serialize)]
pub struct GridPointSummary {
    pub theta: Vec<f64>,
    pub sigma: f64,
    pub family_hyperparameter: Option<f64>,
    pub weight: f64,
    pub log_posterior: f64,
    pub condition_number: Option<f64>,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub family: String,
    pub order: usize,
    pub smooth: String,
    pub basis_size: usize,
    pub region: (f64, f64),
    pub observations: usize,
    pub num_quad: usize,
    pub samples: usize,
    pub seed: u64,
    pub log_marginal: Option<f64>,
    pub theta_mode: Vec<f64>,
    pub max_condition_number: Option<f64>,
    pub grid: Vec<GridPointSummary>,
}

impl PosteriorFit {
    pub fn summary(&self) -> FitSummary {
        let smooth = match &self.model.smooth {
            SmoothTerm::OSpline { .. } => "ospline",
            SmoothTerm::Exact(_) => "exact",
        };
        FitSummary {
            family: self.model.family.name().to_string(),
            order: self.model.order(),
            smooth: smooth.to_string(),
            basis_size: self.model.smooth.dim(),
            region: self.model.region(),
            observations: self.model.n(),
            num_quad: self.num_quad,
            samples: self.num_samples(),
            seed: self.seed,
            log_marginal: self.log_marginal,
            theta_mode: self.theta_mode.clone(),
            max_condition_number: self.max_condition_number(),
            grid: self
                .points
                .iter()
                .map(|p| GridPointSummary {
                    theta: p.theta.clone(),
                    sigma: self.model.sigma(&p.theta),
                    family_hyperparameter: self.model.family_value(&p.theta),
                    weight: p.weight,
                    log_posterior: p.log_posterior,
                    condition_number: p.condition_number,
                    newton_iterations: p.approx.iterations,
                })
                .collect(),
        }
    }

    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{KnotSet, OSplineBasis};
    use crate::inference::model::{Family, HyperSetting, ModelSpec, SmoothSpec};
    use crate::prior::{ExponentialPrior, PriorTarget};

    fn gaussian_model(noise: HyperSetting) -> LatentModel {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x / 2.0).sin() + 0.2 * ((7.0 * x).cos())).collect();
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 10.0, 8).unwrap()).unwrap();
        let spec = ModelSpec::new(
            xs,
            ys,
            Family::Gaussian { noise_sd: noise },
            SmoothSpec::OSpline(basis),
            ExponentialPrior::new(2.0, PriorTarget::Sigma).unwrap(),
        );
        LatentModel::new(spec).unwrap()
    }

    #[test]
    fn weights_and_sample_count() {
        let model = gaussian_model(HyperSetting::Fixed(0.2));
        let opts = FitOptions { num_quad: 5, samples: 250, ..Default::default() };
        let fit = aghq_fit(&model, &opts).unwrap();
        assert_eq!(fit.points.len(), 5);
        let total: f64 = fit.points.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(fit.num_samples(), 250);
        assert_eq!(fit.sample_point.len(), 250);
    }

    #[test]
    fn single_point_is_empirical_bayes() {
        let model = gaussian_model(HyperSetting::Fixed(0.2));
        let opts = FitOptions { num_quad: 1, samples: 50, ..Default::default() };
        let fit = aghq_fit(&model, &opts).unwrap();
        assert_eq!(fit.points.len(), 1);
        assert!((fit.points[0].theta[0] - fit.theta_mode[0]).abs() < 1e-12);
        assert!(fit.sample_point.iter().all(|&j| j == 0));
    }

    #[test]
    fn gaussian_theta_posterior_matches_direct_quadrature() {
        let model = gaussian_model(HyperSetting::Fixed(0.2));
        let fit = aghq_fit(&model, &FitOptions { num_quad: 12, samples: 10, ..Default::default() }).unwrap();
        // Laplace is exact here, so the log normalizer equals the integral of
        // the analytic marginal over log σ.
        let f = |t: f64| crate::inference::laplace_log_marginal(&model, &[t]).unwrap();
        let c = f(fit.theta_mode[0]);
        let est =
            crate::quadrature::integrate(|t| (f(t) - c).exp(), fit.theta_mode[0] - 8.0, fit.theta_mode[0] + 8.0, 1e-12)
                .unwrap();
        let direct = c + est.value.ln();
        assert!((fit.log_marginal.unwrap() - direct).abs() < 1e-6, "{:?} vs {direct}", fit.log_marginal);
        // Posterior mean of log σ.
        let num = crate::quadrature::integrate(
            |t| t * (f(t) - c).exp(),
            fit.theta_mode[0] - 8.0,
            fit.theta_mode[0] + 8.0,
            1e-12,
        )
        .unwrap();
        let mean_direct = num.value / est.value;
        let mean_grid: f64 = fit.points.iter().map(|p| p.weight * p.theta[0]).sum();
        assert!((mean_grid - mean_direct).abs() < 1e-6, "{mean_grid} vs {mean_direct}");
    }

    #[test]
    fn two_dimensional_grid() {
        let noise = HyperSetting::Estimated(ExponentialPrior::new(3.0, PriorTarget::Sigma).unwrap());
        let model = gaussian_model(noise);
        let fit = aghq_fit(&model, &FitOptions { num_quad: 3, samples: 100, ..Default::default() }).unwrap();
        assert_eq!(fit.points.len(), 9);
        let summary = fit.summary();
        assert_eq!(summary.grid.len(), 9);
        assert!(summary.grid.iter().all(|g| g.family_hyperparameter.unwrap() > 0.0));
    }

    #[test]
    fn sampling_matches_gaussian_approximation() {
        let model = gaussian_model(HyperSetting::Fixed(0.3));
        let m = 100_000;
        let fit = fit_fixed_theta(&model, &[0.0], &FitOptions { samples: m, seed: 11, ..Default::default() }).unwrap();
        let mu = fit.points[0].approx.core_mode();
        let cov = fit.points[0].approx.core_covariance();
        let mean = fit.samples.column_mean();
        for i in 0..mu.len() {
            let se = (cov[(i, i)] / m as f64).sqrt();
            assert!((mean[i] - mu[i]).abs() < 4.0 * se, "coordinate {i}");
        }
        let centered = DMatrix::from_fn(mu.len(), m, |r, c| fit.samples[(r, c)] - mean[r]);
        let emp = &centered * centered.transpose() / (m as f64 - 1.0);
        for i in 0..mu.len() {
            for j in 0..mu.len() {
                // SE of a sample covariance under normality.
                let se = ((cov[(i, j)].powi(2) + cov[(i, i)] * cov[(j, j)]) / m as f64).sqrt();
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 4.0 * se, "entry ({i}, {j})");
            }
        }
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let model = gaussian_model(HyperSetting::Fixed(0.2));
        let opts = FitOptions { num_quad: 4, samples: 200, seed: 5, ..Default::default() };
        let a = aghq_fit(&model, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| aghq_fit(&model, &opts).unwrap());
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn quantile_is_an_order_statistic() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.025), 1.0);
        assert_eq!(quantile(&v, 0.5), 2.0);
        assert_eq!(quantile(&v, 0.975), 4.0);
    }

    #[test]
    fn rejects_bad_options() {
        let model = gaussian_model(HyperSetting::Fixed(0.2));
        assert!(aghq_fit(&model, &FitOptions { num_quad: 0, ..Default::default() }).is_err());
        assert!(aghq_fit(&model, &FitOptions { samples: 0, ..Default::default() }).is_err());
    }
}
