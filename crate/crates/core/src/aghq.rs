//! Adaptive Gauss–Hermite quadrature over a low-dimensional hyperparameter.
//!
//! Given an unnormalized log density `f(θ)`, the grid is centred at the
//! maximizer `θ̂` and scaled by `L`, the Cholesky factor of the inverse
//! negative Hessian at `θ̂`. Nodes of the product Gauss–Hermite rule are
//! mapped through `θ = θ̂ + L z`, and
//!
//! ```text
//! log ∫ exp f(θ) dθ ≈ log|L| + (d/2) log 2π + log Σ_j ω_j exp(‖z_j‖²/2 + f(θ_j))
//! ```
//!
//! where `ω_j` are standard-normal Gauss–Hermite weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::quadrature::GaussHermite;

/// One node of the adapted grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridNode {
    pub theta: Vec<f64>,
    /// Standardized node `z` with `θ = θ̂ + L z`.
    pub z: Vec<f64>,
    pub log_density: f64,
    /// Normalized posterior weight; weights sum to one.
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HyperGrid {
    pub mode: Vec<f64>,
    /// `L` with `L Lᵀ = (−∇² f(θ̂))⁻¹`, row-major.
    pub scale: Vec<Vec<f64>>,
    pub nodes: Vec<GridNode>,
    /// Estimate of `log ∫ exp f(θ) dθ`.
    pub log_normalizer: f64,
    pub optimizer_iterations: usize,
}

/// Settings for the θ optimizer.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-6, fd_step: 5e-3 }
    }
}

fn gradient_hessian<F>(f: &mut F, x: &[f64], fx: f64, h: f64) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let mut g = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut shifted = |delta: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(i, s) in delta {
            y[i] += s;
        }
        f(&y)
    };
    for i in 0..d {
        let fp = shifted(&[(i, h)])?;
        let fm = shifted(&[(i, -h)])?;
        g[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
        for j in 0..i {
            let fpp = shifted(&[(i, h), (j, h)])?;
            let fpm = shifted(&[(i, h), (j, -h)])?;
            let fmp = shifted(&[(i, -h), (j, h)])?;
            let fmm = shifted(&[(i, -h), (j, -h)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((g, hess))
}

/// Maximize `f` by Newton's method on finite-difference derivatives with
/// backtracking. Failed evaluations count as `−∞` during the line search.
pub fn maximize<F>(f: &mut F, init: &[f64], settings: OptimizerSettings) -> Result<(Vec<f64>, f64, usize)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let d = init.len();
    let mut x = init.to_vec();
    let mut fx = f(&x)?;
    let mut last_grad = f64::INFINITY;
    for iter in 0..settings.max_iter {
        let (g, h) = gradient_hessian(f, &x, fx, settings.fd_step)?;
        last_grad = g.amax();
        if last_grad < settings.grad_tol {
            return Ok((x, fx, iter));
        }
        let neg_h = -&h;
        let mut step = match neg_h.clone().cholesky() {
            Some(c) => c.solve(&g),
            // Not concave here: scaled gradient step.
            None => &g / g.norm().max(1.0),
        };
        let max_step = step.amax();
        if max_step > 2.0 {
            step *= 2.0 / max_step;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..d).map(|i| x[i] + step[i]).collect();
            if let Ok(ft) = f(&trial) {
                if ft.is_finite() && ft >= fx - 1e-12 * fx.abs().max(1.0) {
                    let moved = step.amax();
                    x = trial;
                    fx = ft;
                    accepted = true;
                    if moved < 1e-10 {
                        return Ok((x, fx, iter + 1));
                    }
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction within floating-point resolution.
            if last_grad < 1e3 * settings.grad_tol {
                return Ok((x, fx, iter));
            }
            return Err(Error::Iteration { iterations: iter + 1, gradient_norm: last_grad });
        }
    }
    Err(Error::Iteration { iterations: settings.max_iter, gradient_norm: last_grad })
}

struct Layout {
    mode: Vec<f64>,
    scale: DMatrix<f64>,
    log_det_scale: f64,
    iterations: usize,
    z: Vec<DVector<f64>>,
    log_w: Vec<f64>,
    thetas: Vec<Vec<f64>>,
}

fn layout<F>(f: &mut F, init: &[f64], num_quad: usize, settings: OptimizerSettings) -> Result<Layout>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if num_quad == 0 {
        return invalid("number of quadrature points must be at least one");
    }
    let d = init.len();
    if d == 0 {
        return invalid("hyperparameter dimension must be positive");
    }
    let (mode, f_mode, iterations) = maximize(f, init, settings)?;
    let (_, h) = gradient_hessian(f, &mode, f_mode, settings.fd_step)?;
    let neg_h = -h;
    let cov = neg_h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("hyperparameter Hessian at the mode is not negative definite: {neg_h}")))?
        .inverse();
    let scale = cov.cholesky().ok_or_else(|| Error::Numeric("inverse Hessian is not positive definite".into()))?.l();
    let log_det_scale: f64 = scale.diagonal().iter().map(|v| v.ln()).sum();

    let rule = GaussHermite::new(num_quad)?;
    let mut index = vec![0usize; d];
    let (mut z, mut log_w, mut thetas) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        let zj = DVector::from_iterator(d, index.iter().map(|&i| rule.nodes[i]));
        log_w.push(index.iter().map(|&i| rule.weights[i].ln()).sum());
        let theta = DVector::from_column_slice(&mode) + &scale * &zj;
        thetas.push(theta.iter().copied().collect());
        z.push(zj);

        // Odometer increment over the product grid.
        let mut pos = 0;
        while pos < d {
            index[pos] += 1;
            if index[pos] < num_quad {
                break;
            }
            index[pos] = 0;
            pos += 1;
        }
        if pos == d {
            break;
        }
    }
    Ok(Layout { mode, scale, log_det_scale, iterations, z, log_w, thetas })
}

fn finish(lay: Layout, log_densities: Vec<f64>) -> HyperGrid {
    let d = lay.mode.len();
    let log_terms: Vec<f64> =
        lay.z.iter().zip(&lay.log_w).zip(&log_densities).map(|((z, w), f)| w + 0.5 * z.norm_squared() + f).collect();
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    let nodes = lay
        .thetas
        .into_iter()
        .zip(&lay.z)
        .zip(log_densities.iter().zip(&log_terms))
        .map(|((theta, z), (&log_density, t))| GridNode {
            theta,
            z: z.iter().copied().collect(),
            log_density,
            weight: (t - max).exp() / sum,
        })
        .collect();
    let log_normalizer = lay.log_det_scale + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() + max + sum.ln();
    let scale = (0..d).map(|r| lay.scale.row(r).iter().copied().collect()).collect();
    HyperGrid { mode: lay.mode, scale, nodes, log_normalizer, optimizer_iterations: lay.iterations }
}

/// Build the adapted grid with `num_quad` nodes per dimension.
pub fn build_grid<F>(mut f: F, init: &[f64], num_quad: usize, settings: OptimizerSettings) -> Result<HyperGrid>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let lay = layout(&mut f, init, num_quad, settings)?;
    let dens = lay.thetas.iter().map(|t| f(t)).collect::<Result<Vec<_>>>()?;
    Ok(finish(lay, dens))
}

/// As [`build_grid`], but nodes are evaluated in parallel by `eval`, which
/// returns the log density together with a per-node payload.
pub fn build_grid_with<F, G, T>(
    mut f: F,
    eval: G,
    init: &[f64],
    num_quad: usize,
    settings: OptimizerSettings,
) -> Result<(HyperGrid, Vec<T>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, T)> + Sync,
    T: Send,
{
    let lay = layout(&mut f, init, num_quad, settings)?;
    let evaluated = lay.thetas.par_iter().map(|t| eval(t)).collect::<Result<Vec<_>>>()?;
    let (dens, payload): (Vec<f64>, Vec<T>) = evaluated.into_iter().unzip();
    Ok((finish(lay, dens), payload))
}
