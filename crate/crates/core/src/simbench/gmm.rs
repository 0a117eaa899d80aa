use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::basis::{KnotSet, OSplineBasis};
use crate::error::{invalid, Result};
use crate::gp_exact::regular_grid;
use crate::inference::{
    aghq_fit, mixture_moments, posterior_moments, Family, FitOptions, HyperSetting, LatentModel, ModelSpec,
    PosteriorFit, SmoothSpec, SmoothTerm,
};
use crate::prior::{prior_from_psd, PsdSpec};

pub const MIXTURE_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];
/// Component means are drawn from `N(5, 2²)`.
pub const MEAN_CENTER: f64 = 5.0;
pub const MEAN_SD: f64 = 2.0;

/// Standardized mixture of unit-variance normal densities,
/// `(Σ δ_i φ(x − μ_i) − c) / s`, with `c` and `s` the sample mean and SD of
/// the raw mixture over the design points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureTruth {
    pub means: [f64; 3],
    pub center: f64,
    pub scale: f64,
}

fn raw(means: &[f64; 3], x: f64, q: usize) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    MIXTURE_WEIGHTS
        .iter()
        .zip(means)
        .map(|(w, mu)| {
            let z = x - mu;
            let phi = norm * (-0.5 * z * z).exp();
            // Derivatives of φ: φ' = −zφ, φ'' = (z² − 1)φ, φ''' = (3z − z³)φ.
            let poly = match q {
                0 => 1.0,
                1 => -z,
                2 => z * z - 1.0,
                3 => 3.0 * z - z * z * z,
                _ => unreachable!("derivative order checked by caller"),
            };
            w * poly * phi
        })
        .sum()
}

impl MixtureTruth {
    pub fn new(means: [f64; 3], xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let vals: Vec<f64> = xs.iter().map(|&x| raw(&means, x, 0)).collect();
        let center = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - center).powi(2)).sum::<f64>() / (n - 1.0);
        Self { means, center, scale: var.sqrt() }
    }

    /// `q`-th derivative of the standardized truth, `q ≤ 3`.
    pub fn eval(&self, x: f64, q: usize) -> f64 {
        assert!(q <= 3, "derivative order {q} not available");
        let v = raw(&self.means, x, q);
        if q == 0 {
            (v - self.center) / self.scale
        } else {
            v / self.scale
        }
    }
}

/// rMSE of the posterior means of `g`, `g′`, `g″` in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmseRow {
    pub replication: usize,
    pub order: usize,
    pub rmse: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub replication: usize,
    pub order: usize,
    pub q: usize,
    pub x: f64,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Per-replication rMSEs with ratios to the reference method's medians.
#[derive(Debug, Clone)]
pub struct RmseReport {
    /// Order of the reference method (first in the config).
    pub reference_order: usize,
    pub rows: Vec<RmseRow>,
    pub curves: Vec<CurveRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl RmseReport {
    pub fn orders(&self) -> Vec<usize> {
        let mut o: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !o.contains(&r.order) {
                o.push(r.order);
            }
        }
        o
    }

    /// Median rMSE of `g^{(q)}` for one method.
    pub fn median_rmse(&self, order: usize, q: usize) -> f64 {
        median(self.rows.iter().filter(|r| r.order == order).map(|r| r.rmse[q]).collect())
    }

    /// rMSE scaled by the reference method's median.
    pub fn ratio(&self, row: &RmseRow, q: usize) -> f64 {
        row.rmse[q] / self.median_rmse(self.reference_order, q)
    }

    pub fn write_rmse_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replication", "method", "rmse_g", "rmse_g1", "rmse_g2", "ratio_g", "ratio_g1", "ratio_g2"])?;
        let refs: Vec<f64> = (0..3).map(|q| self.median_rmse(self.reference_order, q)).collect();
        for r in &self.rows {
            let mut rec = vec![r.replication.to_string(), method_label(r.order)];
            rec.extend(r.rmse.iter().map(|v| v.to_string()));
            rec.extend((0..3).map(|q| (r.rmse[q] / refs[q]).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "median_rmse_g",
            "median_rmse_g1",
            "median_rmse_g2",
            "median_ratio_g",
            "median_ratio_g1",
            "median_ratio_g2",
        ])?;
        for order in self.orders() {
            let mut rec = vec![method_label(order)];
            rec.extend((0..3).map(|q| self.median_rmse(order, q).to_string()));
            for q in 0..3 {
                let ratios = self.rows.iter().filter(|r| r.order == order).map(|r| self.ratio(r, q)).collect();
                rec.push(median(ratios).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replication", "method", "q", "x", "truth", "mean", "sd"])?;
        for c in &self.curves {
            w.write_record(&[
                c.replication.to_string(),
                method_label(c.order),
                c.q.to_string(),
                c.x.to_string(),
                c.truth.to_string(),
                c.mean.to_string(),
                c.sd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn method_label(order: usize) -> String {
    format!("ospline_p{order}")
}

/// Posterior moments of `g^{(q)}(xs)`. For `q = p` (available for the
/// O-spline only) the derivative is the piecewise-constant one defined
/// away from the knots, and the polynomial part contributes nothing.
pub fn derivative_moments(fit: &PosteriorFit, xs: &[f64], q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = fit.model.order();
    if q < p {
        return posterior_moments(fit, xs, q);
    }
    let basis = match &fit.model.smooth {
        SmoothTerm::OSpline { basis, .. } if q == p => basis,
        _ => return invalid(format!("derivative order {q} is not available for order {p}")),
    };
    let mut a = DMatrix::zeros(xs.len(), fit.model.core_dim());
    for (r, &x) in xs.iter().enumerate() {
        for i in 0..basis.len() {
            a[(r, i)] = basis.eval(i, x, q)?;
        }
    }
    Ok(mixture_moments(fit, &a, None))
}

/// The design points and response of one replication.
pub fn replicate_data(cfg: &ExperimentConfig, replication: usize) -> (Vec<f64>, Vec<f64>, MixtureTruth) {
    let n = cfg.n[0];
    let xs = regular_grid(cfg.region.0, cfg.region.1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(replication as u64 + 1);
    let mean_dist = Normal::new(MEAN_CENTER, MEAN_SD).expect("valid normal");
    let means = [mean_dist.sample(&mut rng), mean_dist.sample(&mut rng), mean_dist.sample(&mut rng)];
    let truth = MixtureTruth::new(means, &xs);
    let noise = Normal::new(0.0, cfg.noise_sd).expect("positive noise SD");
    let ys = xs.iter().map(|&x| truth.eval(x, 0) + noise.sample(&mut rng)).collect();
    (xs, ys, truth)
}

fn fit_order(cfg: &ExperimentConfig, order: usize, xs: &[f64], ys: &[f64]) -> Result<PosteriorFit> {
    let prior = prior_from_psd(&PsdSpec::new(cfg.psd_h, order)?, cfg.psd_u, cfg.psd_alpha)?;
    let basis = OSplineBasis::new(order, KnotSet::equal(cfg.region.0, cfg.region.1, cfg.knots[0])?)?;
    let spec = ModelSpec::new(
        xs.to_vec(),
        ys.to_vec(),
        Family::Gaussian { noise_sd: HyperSetting::Fixed(cfg.noise_sd) },
        SmoothSpec::OSpline(basis),
        prior,
    );
    let model = LatentModel::new(spec)?;
    aghq_fit(&model, &FitOptions { num_quad: cfg.num_quad, samples: 1, seed: cfg.seed, ..Default::default() })
}

/// Replications of the mixture-truth study. Each method's rMSE uses the
/// analytic posterior means at the design points.
pub fn run_gmm_study(cfg: &ExperimentConfig) -> Result<RmseReport> {
    if cfg.orders.iter().any(|&p| p < 2) {
        return invalid("every order must be at least 2 so that g'' is defined");
    }
    if cfg.n[0] < 3 {
        return invalid("at least three design points are required");
    }
    let per_rep: Vec<(Vec<RmseRow>, Vec<CurveRow>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<_> {
            let (xs, ys, truth) = replicate_data(cfg, rep);
            let mut rows = Vec::new();
            let mut curves = Vec::new();
            for &order in &cfg.orders {
                let fit = fit_order(cfg, order, &xs, &ys)?;
                let mut rmse = [0.0; 3];
                for (q, slot) in rmse.iter_mut().enumerate() {
                    let (mean, sd) = derivative_moments(&fit, &xs, q)?;
                    let mut sq = 0.0;
                    for i in 0..xs.len() {
                        let t = truth.eval(xs[i], q);
                        sq += (mean[i] - t).powi(2);
                        curves.push(CurveRow {
                            replication: rep,
                            order,
                            q,
                            x: xs[i],
                            truth: t,
                            mean: mean[i],
                            sd: sd[i],
                        });
                    }
                    *slot = (sq / xs.len() as f64).sqrt();
                }
                rows.push(RmseRow { replication: rep, order, rmse });
            }
            Ok((rows, curves))
        })
        .collect::<Result<_>>()?;
    let (rows, curves): (Vec<Vec<RmseRow>>, Vec<Vec<CurveRow>>) = per_rep.into_iter().unzip();
    Ok(RmseReport {
        reference_order: cfg.orders[0],
        rows: rows.into_iter().flatten().collect(),
        curves: curves.into_iter().flatten().collect(),
    })
}
