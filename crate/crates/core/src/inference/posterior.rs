use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::fit::{quantile, PosteriorFit};
use super::model::{ExactField, LatentModel, SmoothTerm};
use crate::basis::polynomial_design;
use crate::error::{invalid, Result};
use crate::gp_exact::unit_cov;

/// Scale on which a posterior curve is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    /// `exp g` for `q = 0` and `g′ exp g` for `q = 1`.
    Exp,
}

/// Pointwise posterior summaries of `g^{(q)}` with the sample paths.
#[derive(Debug, Clone)]
pub struct PosteriorFunction {
    pub xs: Vec<f64>,
    pub q: usize,
    pub transform: Transform,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// 2.5% and 97.5% pointwise quantiles.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `len(xs) × M`.
    pub samples: DMatrix<f64>,
}

/// Linear map from the core latent block to `g^{(q)}(xs)`, plus, for the
/// exact smooth term, the unit-σ kriging variance left over at each x.
pub(crate) fn functional(model: &LatentModel, xs: &[f64], q: usize) -> Result<(DMatrix<f64>, Option<DVector<f64>>)> {
    let p = model.order();
    if q >= p {
        return invalid(format!("derivative order {q} must be below the order {p}"));
    }
    let (a, b) = model.region();
    if let Some(x) = xs.iter().find(|&&x| !(x >= a && x <= b)) {
        return invalid(format!("location {x} lies outside the region [{a}, {b}]"));
    }
    let ks = model.smooth.dim();
    let mut out = DMatrix::zeros(xs.len(), model.core_dim());
    let residual = match &model.smooth {
        SmoothTerm::OSpline { basis, .. } => {
            out.columns_mut(0, ks).copy_from(&basis.design_matrix(xs, q)?.values);
            None
        }
        SmoothTerm::Exact(field) => {
            let (weights, var) = kriging(field, xs, q);
            out.columns_mut(0, ks).copy_from(&weights);
            Some(var)
        }
    };
    let shifted: Vec<f64> = xs.iter().map(|x| x - a).collect();
    out.columns_mut(ks, p).copy_from(&polynomial_design(&shifted, p, q)?);
    Ok((out, residual))
}

/// Weights `k_q(x, L) K⁻¹` and variances `k_qq(x, x) − k_q K⁻¹ k_qᵀ`.
fn kriging(field: &ExactField, xs: &[f64], q: usize) -> (DMatrix<f64>, DVector<f64>) {
    let p = field.order;
    let o = field.origin;
    let cross = DMatrix::from_fn(field.locations.len(), xs.len(), |i, j| {
        unit_cov(p, 0, q, field.locations[i] - o, (xs[j] - o).max(0.0))
    });
    let solved = field.chol.solve(&cross);
    let var = DVector::from_fn(xs.len(), |j, _| {
        let u = (xs[j] - o).max(0.0);
        (unit_cov(p, q, q, u, u) - cross.column(j).dot(&solved.column(j))).max(0.0)
    });
    (solved.transpose(), var)
}

/// Evaluate `g^{(q)}` on every posterior sample.
///
/// For the exact smooth term the field between latent locations is filled
/// in by conditional (kriging) draws, independent across `xs`.
pub fn posterior_function(fit: &PosteriorFit, xs: &[f64], q: usize, transform: Transform) -> Result<PosteriorFunction> {
    if transform == Transform::Exp && q > 1 {
        return invalid("the exponential transform is available for q = 0 and q = 1 only");
    }
    let mut samples = sample_paths(fit, xs, q, 0)?;
    if transform == Transform::Exp {
        if q == 0 {
            samples.apply(|v| *v = v.exp());
        } else {
            let g = sample_paths(fit, xs, 0, 1)?;
            samples.zip_apply(&g, |d, g| *d *= g.exp());
        }
    }
    let m = samples.ncols() as f64;
    let (mut mean, mut sd, mut lower, mut upper) = (vec![], vec![], vec![], vec![]);
    for row in samples.row_iter() {
        let mut v: Vec<f64> = row.iter().copied().collect();
        let mu = v.iter().sum::<f64>() / m;
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        v.sort_by(f64::total_cmp);
        mean.push(mu);
        sd.push(var.sqrt());
        lower.push(quantile(&v, 0.025));
        upper.push(quantile(&v, 0.975));
    }
    Ok(PosteriorFunction { xs: xs.to_vec(), q, transform, mean, sd, lower, upper, samples })
}

fn sample_paths(fit: &PosteriorFit, xs: &[f64], q: usize, stream: u64) -> Result<DMatrix<f64>> {
    let (a, residual) = functional(&fit.model, xs, q)?;
    let mut paths = a * &fit.samples;
    if let Some(var) = residual {
        let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
        rng.set_stream((1u64 << 32) + (q as u64) * 2 + stream);
        let sigmas = fit.sample_sigmas();
        for (c, mut col) in paths.column_iter_mut().enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigmas[c] * var[r].sqrt() * z;
            }
        }
    }
    Ok(paths)
}

/// Posterior mean and SD of `g^{(q)}(xs)` computed analytically from the
/// mixture of Gaussian approximations (no sampling error).
pub fn posterior_moments(fit: &PosteriorFit, xs: &[f64], q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, residual) = functional(&fit.model, xs, q)?;
    Ok(mixture_moments(fit, &a, residual.as_ref()))
}

/// Mixture mean and SD of `a · core (+ residual noise)` over the grid.
pub(crate) fn mixture_moments(
    fit: &PosteriorFit,
    a: &DMatrix<f64>,
    residual: Option<&DVector<f64>>,
) -> (Vec<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut first: DVector<f64> = DVector::zeros(n);
    let mut second: DVector<f64> = DVector::zeros(n);
    for p in &fit.points {
        let mean = a * p.approx.core_mode();
        let half =
            p.approx.core_chol.l().solve_lower_triangular(&a.transpose()).expect("Cholesky factor is nonsingular");
        let sigma2 = fit.model.sigma(&p.theta).powi(2);
        for i in 0..n {
            let mut var = half.column(i).norm_squared();
            if let Some(r) = residual {
                var += sigma2 * r[i];
            }
            first[i] += p.weight * mean[i];
            second[i] += p.weight * (var + mean[i] * mean[i]);
        }
    }
    let sd = (0..n).map(|i| (second[i] - first[i] * first[i]).max(0.0).sqrt()).collect();
    (first.iter().copied().collect(), sd)
}

/// Write curves as CSV with header `x,q,mean,sd,lower,upper`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[PosteriorFunction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "q", "mean", "sd", "lower", "upper"])?;
    for c in curves {
        for i in 0..c.xs.len() {
            w.write_record(&[
                c.xs[i].to_string(),
                c.q.to_string(),
                c.mean[i].to_string(),
                c.sd[i].to_string(),
                c.lower[i].to_string(),
                c.upper[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{KnotSet, OSplineBasis};
    use crate::gp_exact::{exact_gp_fit, GpData, IwpKernel, OSplineKernel};
    use crate::inference::fit::{aghq_fit, fit_fixed_theta, FitOptions};
    use crate::inference::model::{Family, HyperSetting, ModelSpec, SmoothSpec};
    use crate::prior::{ExponentialPrior, PriorTarget};

    fn data(n: usize) -> (Vec<f64>, Vec<f64>) {
        let xs: Vec<f64> = (0..n).map(|i| 10.0 * (i as f64 + 0.3) / n as f64).collect();
        let ys = xs.iter().map(|x| (x / 2.0).sin() * 1.7 + 0.1 * (3.0 * x).cos()).collect();
        (xs, ys)
    }

    fn model(smooth: SmoothSpec, noise: f64) -> LatentModel {
        let (xs, ys) = data(25);
        let spec = ModelSpec::new(
            xs,
            ys,
            Family::Gaussian { noise_sd: HyperSetting::Fixed(noise) },
            smooth,
            ExponentialPrior::new(1.0, PriorTarget::Sigma).unwrap(),
        );
        LatentModel::new(spec).unwrap()
    }

    fn gp_data(noise: f64) -> GpData {
        let (xs, ys) = data(25);
        GpData { xs, ys, noise_sd: noise, poly_prior_sd: vec![1000f64.sqrt(); 3], origin: 0.0 }
    }

    #[test]
    fn fixed_theta_matches_dense_conditioning() {
        let basis = OSplineBasis::new(3, KnotSet::equal(0.0, 10.0, 12).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis.clone()), 0.3);
        let sigma: f64 = 0.8;
        let fit = fit_fixed_theta(&m, &[sigma.ln()], &FitOptions { samples: 10, ..Default::default() }).unwrap();
        let kernel = OSplineKernel::new(basis, sigma).unwrap();
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 / 2.0).collect();
        for q in 0..3 {
            let (mean, sd) = posterior_moments(&fit, &xs, q).unwrap();
            let at: Vec<(f64, usize)> = xs.iter().map(|&x| (x, q)).collect();
            let gp = exact_gp_fit(&kernel, &gp_data(0.3), &at).unwrap();
            for i in 0..xs.len() {
                assert!((mean[i] - gp.mean[i]).abs() < 1e-6, "q={q} mean at {}", xs[i]);
                assert!((sd[i] - gp.sd[i]).abs() < 1e-6, "q={q} sd at {}", xs[i]);
            }
        }
    }

    #[test]
    fn exact_term_matches_dense_conditioning() {
        let m = model(SmoothSpec::Exact { order: 2, region: (0.0, 10.0) }, 0.3);
        let sigma: f64 = 0.6;
        let fit = fit_fixed_theta(&m, &[sigma.ln()], &FitOptions { samples: 10, ..Default::default() }).unwrap();
        let kernel = IwpKernel::new(2, sigma).unwrap();
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 / 2.0).collect();
        let mut gd = gp_data(0.3);
        gd.poly_prior_sd.truncate(2);
        for q in 0..2 {
            let (mean, sd) = posterior_moments(&fit, &xs, q).unwrap();
            let at: Vec<(f64, usize)> = xs.iter().map(|&x| (x, q)).collect();
            let gp = exact_gp_fit(&kernel, &gd, &at).unwrap();
            for i in 0..xs.len() {
                assert!((mean[i] - gp.mean[i]).abs() < 1e-6 * (1.0 + gp.mean[i].abs()), "q={q} at {}", xs[i]);
                assert!((sd[i] - gp.sd[i]).abs() < 1e-6 * (1.0 + gp.sd[i]), "q={q} at {}", xs[i]);
            }
        }
    }

    #[test]
    fn region_start_is_polynomial_only() {
        let basis = OSplineBasis::new(3, KnotSet::equal(0.0, 10.0, 6).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis), 0.3);
        let fit = fit_fixed_theta(&m, &[0.0], &FitOptions { samples: 40, ..Default::default() }).unwrap();
        let f = posterior_function(&fit, &[0.0], 0, Transform::Identity).unwrap();
        let gamma0 = fit.samples.row(m.poly_offset());
        assert_eq!(f.samples.row(0).iter().copied().collect::<Vec<_>>(), gamma0.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn derivative_paths_match_finite_differences() {
        let basis = OSplineBasis::new(3, KnotSet::equal(0.0, 10.0, 8).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis), 0.3);
        let fit = aghq_fit(&m, &FitOptions { num_quad: 3, samples: 60, ..Default::default() }).unwrap();
        let h = 1e-5;
        let xs = [0.7, 2.5, 4.1, 8.8];
        let plus: Vec<f64> = xs.iter().map(|x| x + h).collect();
        let minus: Vec<f64> = xs.iter().map(|x| x - h).collect();
        let d = posterior_function(&fit, &xs, 1, Transform::Identity).unwrap();
        let gp = posterior_function(&fit, &plus, 0, Transform::Identity).unwrap();
        let gm = posterior_function(&fit, &minus, 0, Transform::Identity).unwrap();
        let fd = (gp.samples - gm.samples) / (2.0 * h);
        assert!((d.samples - fd).amax() < 1e-3);
    }

    #[test]
    fn exp_interval_is_exp_of_interval() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 10.0, 6).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis), 0.3);
        let fit = fit_fixed_theta(&m, &[0.0], &FitOptions { samples: 101, ..Default::default() }).unwrap();
        let xs = [1.0, 5.0, 9.0];
        let g = posterior_function(&fit, &xs, 0, Transform::Identity).unwrap();
        let e = posterior_function(&fit, &xs, 0, Transform::Exp).unwrap();
        for i in 0..3 {
            assert_eq!(e.lower[i], g.lower[i].exp());
            assert_eq!(e.upper[i], g.upper[i].exp());
        }
        let d = posterior_function(&fit, &xs, 1, Transform::Exp).unwrap();
        let d1 = posterior_function(&fit, &xs, 1, Transform::Identity).unwrap();
        let expected = d1.samples.zip_map(&g.samples, |d, g| d * g.exp());
        assert_eq!(d.samples, expected);
    }

    #[test]
    fn derivative_order_checked() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 10.0, 4).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis), 0.3);
        let fit = fit_fixed_theta(&m, &[0.0], &FitOptions { samples: 5, ..Default::default() }).unwrap();
        assert!(posterior_function(&fit, &[1.0], 2, Transform::Identity).is_err());
        assert!(posterior_moments(&fit, &[1.0], 2).is_err());
    }

    #[test]
    fn curves_csv_round_trips() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 10.0, 4).unwrap()).unwrap();
        let m = model(SmoothSpec::OSpline(basis), 0.3);
        let fit = fit_fixed_theta(&m, &[0.0], &FitOptions { samples: 20, ..Default::default() }).unwrap();
        let c = posterior_function(&fit, &[0.1, 3.3, 7.0], 1, Transform::Identity).unwrap();
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, std::slice::from_ref(&c)).unwrap();
        let mut r = csv::Reader::from_reader(buf.as_slice());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.unwrap();
            assert_eq!(rec[0].parse::<f64>().unwrap(), c.xs[i]);
            assert_eq!(rec[2].parse::<f64>().unwrap(), c.mean[i]);
            assert_eq!(rec[5].parse::<f64>().unwrap(), c.upper[i]);
        }
    }
}
