use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::model::{Family, LatentModel, SmoothTerm};
use crate::error::{invalid, Error, Result};

/// Prior precision of the latent vector at a given θ.
pub(crate) struct LatentPrior<'a> {
    smooth: SmoothPrecision<'a>,
    /// Precisions of the polynomial and fixed-effect coefficients.
    rest: DVector<f64>,
    /// Precision `1/φ²` of the observation-level effects.
    obs: Option<f64>,
    pub(crate) log_det: f64,
}

enum SmoothPrecision<'a> {
    Diagonal(DVector<f64>),
    Dense { k_inv: &'a DMatrix<f64>, scale: f64 },
}

impl LatentModel {
    pub(crate) fn latent_prior(&self, theta: &[f64]) -> LatentPrior<'_> {
        let sigma2 = self.sigma(theta).powi(2);
        let ks = self.smooth.dim();
        let (smooth, mut log_det) = match &self.smooth {
            SmoothTerm::OSpline { precision, .. } => {
                let diag = precision / sigma2;
                let ld = diag.iter().map(|v| v.ln()).sum::<f64>();
                (SmoothPrecision::Diagonal(diag), ld)
            }
            SmoothTerm::Exact(f) => (
                SmoothPrecision::Dense { k_inv: &f.k_inv, scale: 1.0 / sigma2 },
                -f.log_det_k - ks as f64 * sigma2.ln(),
            ),
        };
        let rest = DVector::from_iterator(
            self.order() + self.fixed_prior_sd.len(),
            self.poly_prior_sd.iter().chain(&self.fixed_prior_sd).map(|s| 1.0 / (s * s)),
        );
        log_det += rest.iter().map(|v| v.ln()).sum::<f64>();
        let obs = if self.has_observation_effects() {
            let phi = self.family_value(theta).expect("overdispersion SD");
            let prec = 1.0 / (phi * phi);
            log_det += self.n() as f64 * prec.ln();
            Some(prec)
        } else {
            None
        };
        LatentPrior { smooth, rest, obs, log_det }
    }
}

impl LatentPrior<'_> {
    /// `Q_core · c` for the core block `(w, γ, β)`.
    fn apply_core(&self, c: &DVector<f64>) -> DVector<f64> {
        let ks = c.len() - self.rest.len();
        let mut out = DVector::zeros(c.len());
        match &self.smooth {
            SmoothPrecision::Diagonal(d) => {
                out.rows_mut(0, ks).copy_from(&d.component_mul(&c.rows(0, ks)));
            }
            SmoothPrecision::Dense { k_inv, scale } => {
                out.rows_mut(0, ks).copy_from(&(*k_inv * c.rows(0, ks) * *scale));
            }
        }
        out.rows_mut(ks, self.rest.len()).copy_from(&self.rest.component_mul(&c.rows(ks, self.rest.len())));
        out
    }

    fn add_core_to(&self, m: &mut DMatrix<f64>) {
        let ks = m.nrows() - self.rest.len();
        match &self.smooth {
            SmoothPrecision::Diagonal(d) => {
                for i in 0..ks {
                    m[(i, i)] += d[i];
                }
            }
            SmoothPrecision::Dense { k_inv, scale } => {
                let mut block = m.view_mut((0, 0), (ks, ks));
                block += *k_inv * *scale;
            }
        }
        for (j, v) in self.rest.iter().enumerate() {
            m[(ks + j, ks + j)] += v;
        }
    }
}

/// Log-likelihood and its first two η-derivatives for one observation.
fn obs_terms(family: &Family, noise_sd: Option<f64>, y: f64, eta: f64, row: usize) -> Result<(f64, f64, f64)> {
    match family {
        Family::Gaussian { .. } => {
            let k = noise_sd.expect("noise SD");
            let prec = 1.0 / (k * k);
            let r = y - eta;
            Ok((-0.5 * (2.0 * PI).ln() - k.ln() - 0.5 * r * r * prec, r * prec, prec))
        }
        _ => {
            let rate = eta.exp();
            if !rate.is_finite() || !eta.is_finite() {
                return Err(Error::Numeric(format!("Poisson rate exp({eta}) is not finite at observation {row}")));
            }
            // ln y! is added once for the whole sample.
            Ok((y * eta - rate, y - rate, rate))
        }
    }
}

/// Linear predictor `η = A c + ε`.
fn linear_predictor(model: &LatentModel, latent: &DVector<f64>) -> DVector<f64> {
    let m = model.core_dim();
    let mut eta = &model.design * latent.rows(0, m);
    if model.has_observation_effects() {
        eta += latent.rows(m, model.n());
    }
    eta
}

struct Evaluation {
    value: f64,
    gradient: DVector<f64>,
    /// Negative second derivative of each likelihood term in `η`.
    curvature: DVector<f64>,
}

fn evaluate(model: &LatentModel, prior: &LatentPrior, latent: &DVector<f64>, theta: &[f64]) -> Result<Evaluation> {
    let m = model.core_dim();
    let n = model.n();
    let eta = linear_predictor(model, latent);
    let noise = match model.family {
        Family::Gaussian { .. } => model.family_value(theta),
        _ => None,
    };
    let mut ll = -model.log_factorial_sum;
    let mut g_eta = DVector::zeros(n);
    let mut curvature = DVector::zeros(n);
    for i in 0..n {
        let (l, g, c) = obs_terms(&model.family, noise, model.response[i], eta[i], i)?;
        ll += l;
        g_eta[i] = g;
        curvature[i] = c;
    }
    if !ll.is_finite() {
        return Err(Error::Numeric("log-likelihood is not finite".into()));
    }
    let core = latent.rows(0, m).into_owned();
    let q_core = prior.apply_core(&core);
    let mut quad = core.dot(&q_core);
    let mut gradient = DVector::zeros(latent.len());
    gradient.rows_mut(0, m).copy_from(&(model.design.tr_mul(&g_eta) - q_core));
    if let Some(prec) = prior.obs {
        let eps = latent.rows(m, n);
        quad += prec * eps.norm_squared();
        gradient.rows_mut(m, n).copy_from(&(&g_eta - eps * prec));
    }
    let dim = latent.len() as f64;
    let log_prior = -0.5 * dim * (2.0 * PI).ln() + 0.5 * prior.log_det - 0.5 * quad;
    let value = log_prior + ll + model.log_hyperprior(theta);
    Ok(Evaluation { value, gradient, curvature })
}

fn check_latent(model: &LatentModel, latent: &DVector<f64>) -> Result<()> {
    if latent.len() != model.latent_dim() {
        return invalid(format!("latent vector has length {}, expected {}", latent.len(), model.latent_dim()));
    }
    Ok(())
}

/// `log π(W, θ, Y)`: Gaussian latent prior, likelihood and the log-scale
/// hyperprior, all with their normalizing constants.
pub fn log_joint(model: &LatentModel, latent: &DVector<f64>, theta: &[f64]) -> Result<f64> {
    model.check_theta(theta)?;
    check_latent(model, latent)?;
    let prior = model.latent_prior(theta);
    Ok(evaluate(model, &prior, latent, theta)?.value)
}

/// Gradient of [`log_joint`] in the latent vector.
pub fn log_joint_gradient(model: &LatentModel, latent: &DVector<f64>, theta: &[f64]) -> Result<DVector<f64>> {
    model.check_theta(theta)?;
    check_latent(model, latent)?;
    let prior = model.latent_prior(theta);
    Ok(evaluate(model, &prior, latent, theta)?.gradient)
}

/// Dense negative Hessian of the log joint,
/// `Q(θ) + Bᵀ D B` with `B = [A | I]` and `D` the likelihood curvature.
pub fn assemble_precision(model: &LatentModel, latent: &DVector<f64>, theta: &[f64]) -> Result<DMatrix<f64>> {
    model.check_theta(theta)?;
    check_latent(model, latent)?;
    let prior = model.latent_prior(theta);
    let ev = evaluate(model, &prior, latent, theta)?;
    let (m, n) = (model.core_dim(), model.n());
    let dim = model.latent_dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut core = weighted_gram(model, &ev.curvature);
    prior.add_core_to(&mut core);
    h.view_mut((0, 0), (m, m)).copy_from(&core);
    if let Some(prec) = prior.obs {
        let da = scale_rows(&model.design, &ev.curvature);
        h.view_mut((m, 0), (n, m)).copy_from(&da);
        h.view_mut((0, m), (m, n)).copy_from(&da.transpose());
        for i in 0..n {
            h[(m + i, m + i)] = prec + ev.curvature[i];
        }
    }
    Ok(h)
}

fn scale_rows(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

/// `Aᵀ diag(d) A`, accumulated over row supports when `A` is sparse.
fn weighted_gram(model: &LatentModel, d: &DVector<f64>) -> DMatrix<f64> {
    let a = &model.design;
    let m = a.ncols();
    if let Some(g) = &model.gram {
        if d.iter().all(|&v| v == d[0]) {
            return g * d[0];
        }
    }
    if model.design_nnz * 4 > a.nrows() * m {
        return a.tr_mul(&scale_rows(a, d));
    }
    let mut g = DMatrix::zeros(m, m);
    for (i, cols) in model.row_support.iter().enumerate() {
        for (u, &c1) in cols.iter().enumerate() {
            let v = d[i] * a[(i, c1)];
            for &c2 in &cols[u..] {
                g[(c1, c2)] += v * a[(i, c2)];
            }
        }
    }
    g.fill_lower_triangle_with_upper_triangle();
    g
}

/// Newton iteration settings.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub max_iter: usize,
    /// Convergence when `‖∇‖ ≤ tol (1 + |log joint|)`.
    pub tol: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

/// Gaussian approximation `N(Ŵ, H⁻¹)` at the conditional mode.
///
/// With observation-level effects `ε` the precision has block form
/// `[[H_cc, H_cε], [H_εc, E]]` with `E` diagonal; the stored factor is of the
/// Schur complement `S = H_cc − H_cε E⁻¹ H_εc`, whose inverse is the marginal
/// covariance of the core block `(w, γ, β)`.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub theta: Vec<f64>,
    pub mode: DVector<f64>,
    /// `log π(Ŵ, θ, Y)`.
    pub log_joint: f64,
    /// `log det H(θ)` of the full latent precision.
    pub log_det: f64,
    pub core_chol: Cholesky<f64, Dyn>,
    /// Diagonal `E` of the observation-effect block, if present.
    pub obs_precision: Option<DVector<f64>>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl GaussianApprox {
    pub fn core_mode(&self) -> DVector<f64> {
        self.mode.rows(0, self.core_chol.l_dirty().nrows()).into_owned()
    }

    pub fn core_covariance(&self) -> DMatrix<f64> {
        self.core_chol.inverse()
    }

    pub fn latent_dim(&self) -> usize {
        self.mode.len()
    }
}

struct Factored {
    chol: Cholesky<f64, Dyn>,
    obs: Option<DVector<f64>>,
    log_det: f64,
    /// Row scale `D − D² / E` applied to `A` inside `S`.
    curvature: DVector<f64>,
    /// Squared ratio of the largest to the smallest pivot of the
    /// equilibrated factor, a cheap lower bound on its condition number.
    pivot_spread: f64,
}

/// Pivot spread beyond which the normal equations of a Gaussian model lose
/// too many digits and the mode is recomputed by QR.
const PIVOT_SPREAD_LIMIT: f64 = 1e10;

fn factor(model: &LatentModel, prior: &LatentPrior, curvature: &DVector<f64>) -> Result<Factored> {
    let (eff, obs) = match prior.obs {
        Some(prec) => {
            let e = curvature.map(|c| c + prec);
            (curvature.zip_map(&e, |c, e| c - c * c / e), Some(e))
        }
        None => (curvature.clone(), None),
    };
    let mut s = weighted_gram(model, &eff);
    prior.add_core_to(&mut s);
    let dim = s.nrows();
    let (chol, pivot_spread) = equilibrated_cholesky(s)
        .or_else(|| square_root_factor(model, prior, &eff).map(|c| (c, f64::INFINITY)))
        .ok_or_else(|| Error::Numeric(format!("latent precision ({dim}×{dim}) is not positive definite at θ")))?;
    let mut log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if let Some(e) = &obs {
        log_det += e.iter().map(|v| v.ln()).sum::<f64>();
    }
    Ok(Factored { chol, obs, log_det, curvature: curvature.clone(), pivot_spread })
}

/// Cholesky of a symmetric positive definite matrix after scaling it to a
/// unit diagonal, which keeps badly scaled precisions factorable.
fn equilibrated_cholesky(mut s: DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = s.nrows();
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let d = s[(i, i)];
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        scale[i] = d.sqrt().recip();
    }
    for j in 0..n {
        for i in 0..n {
            s[(i, j)] *= scale[i] * scale[j];
        }
    }
    let mut l = Cholesky::new(s)?.unpack();
    let pivots = l.diagonal();
    let spread = (pivots.max() / pivots.min()).powi(2);
    for i in 0..n {
        let r = scale[i].recip();
        l.row_mut(i).scale_mut(r);
    }
    Some((Cholesky::pack_dirty(l), spread))
}

/// Factor `AᵀDA + Q` through a QR decomposition of `[√D A; √Q]`, which
/// avoids forming the Gram matrix when the data swamp a diagonal prior.
fn square_root_factor(model: &LatentModel, prior: &LatentPrior, eff: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
    stacked_least_squares(model, prior, eff, &DVector::zeros(model.n())).map(|(chol, _)| chol)
}

/// Minimize `‖√D (z − A c)‖² + cᵀ Q c` for a diagonal prior by QR of the
/// augmented matrix `[√D A, √D z; √Q, 0]`. Returns the factor of
/// `AᵀDA + Q` and the minimizer.
fn stacked_least_squares(
    model: &LatentModel,
    prior: &LatentPrior,
    eff: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<(Cholesky<f64, Dyn>, DVector<f64>)> {
    let SmoothPrecision::Diagonal(d) = &prior.smooth else {
        return None;
    };
    if eff.iter().any(|v| !(*v >= 0.0)) {
        return None;
    }
    let (n, m) = model.design.shape();
    let mut stacked = DMatrix::zeros(n + m, m + 1);
    for i in 0..n {
        let w = eff[i].sqrt();
        for j in 0..m {
            stacked[(i, j)] = w * model.design[(i, j)];
        }
        stacked[(i, m)] = w * z[i];
    }
    for (j, q) in d.iter().chain(prior.rest.iter()).enumerate() {
        stacked[(n + j, j)] = q.sqrt();
    }
    let r = stacked.qr().r();
    let mut upper = r.view((0, 0), (m, m)).into_owned();
    let mut rhs = r.view((0, m), (m, 1)).column(0).into_owned();
    for j in 0..m {
        let v = upper[(j, j)];
        if !(v != 0.0 && v.is_finite()) {
            return None;
        }
        if v < 0.0 {
            upper.row_mut(j).neg_mut();
            rhs[j] = -rhs[j];
        }
    }
    let solution = upper.solve_upper_triangular(&rhs)?;
    Some((Cholesky::pack_dirty(upper.transpose()), solution))
}

/// Mode of the Gaussian family, whose log joint is quadratic in the latent
/// vector.
fn gaussian_mode(
    model: &LatentModel,
    prior: &LatentPrior,
    curvature: &DVector<f64>,
) -> Result<(Factored, DVector<f64>)> {
    let z = DVector::from_column_slice(&model.response);
    let normal = factor(model, prior, curvature);
    if !matches!(&normal, Ok(f) if f.pivot_spread <= PIVOT_SPREAD_LIMIT) {
        if let Some((chol, core)) = stacked_least_squares(model, prior, curvature, &z) {
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let fac = Factored { chol, obs: None, log_det, curvature: curvature.clone(), pivot_spread: f64::NAN };
            return Ok((fac, core));
        }
    }
    let fac = normal?;
    let core = fac.chol.solve(&model.design.tr_mul(&curvature.component_mul(&z)));
    Ok((fac, core))
}

/// Solve `H Δ = g` using the block structure.
fn newton_step(model: &LatentModel, f: &Factored, g: &DVector<f64>) -> DVector<f64> {
    let m = model.core_dim();
    let mut gc = g.rows(0, m).into_owned();
    match &f.obs {
        None => f.chol.solve(&gc),
        Some(e) => {
            let n = model.n();
            let ge = g.rows(m, n);
            // H_cε E⁻¹ g_ε = Aᵀ (D ∘ g_ε / E).
            let t = DVector::from_fn(n, |i, _| f.curvature[i] * ge[i] / e[i]);
            gc -= model.design.tr_mul(&t);
            let dc = f.chol.solve(&gc);
            let adc = &model.design * &dc;
            let de = DVector::from_fn(n, |i, _| (ge[i] - f.curvature[i] * adc[i]) / e[i]);
            let mut out = DVector::zeros(m + n);
            out.rows_mut(0, m).copy_from(&dc);
            out.rows_mut(m, n).copy_from(&de);
            out
        }
    }
}

/// Find the conditional mode `Ŵ(θ)` by Newton's method with step halving
/// and return the Gaussian approximation there.
///
/// Iteration stops once the gradient meets the tolerance, or when the
/// Newton decrement falls below floating-point resolution of the log joint
/// (severely ill-conditioned priors cannot reach the gradient tolerance).
/// The Gaussian family is solved directly as penalized least squares.
pub fn newton_mode(
    model: &LatentModel,
    theta: &[f64],
    init: Option<&DVector<f64>>,
    settings: NewtonSettings,
) -> Result<GaussianApprox> {
    model.check_theta(theta)?;
    let dim = model.latent_dim();
    let mut latent = match init {
        Some(w) => {
            check_latent(model, w)?;
            w.clone()
        }
        None => DVector::zeros(dim),
    };
    let prior = model.latent_prior(theta);
    let mut ev = evaluate(model, &prior, &latent, theta)?;
    if matches!(model.family, Family::Gaussian { .. }) {
        let (fac, mode) = gaussian_mode(model, &prior, &ev.curvature)?;
        ev = evaluate(model, &prior, &mode, theta)?;
        return Ok(GaussianApprox {
            theta: theta.to_vec(),
            mode,
            log_joint: ev.value,
            log_det: fac.log_det,
            core_chol: fac.chol,
            obs_precision: None,
            iterations: 1,
            gradient_norm: ev.gradient.norm(),
        });
    }
    for iter in 0..=settings.max_iter {
        let gnorm = ev.gradient.norm();
        let fac = factor(model, &prior, &ev.curvature)?;
        let scale = 1.0 + ev.value.abs();
        let step = newton_step(model, &fac, &ev.gradient);
        let decrement = ev.gradient.dot(&step);
        if gnorm <= settings.tol * scale || decrement <= 1e-15 * scale {
            return Ok(GaussianApprox {
                theta: theta.to_vec(),
                mode: latent,
                log_joint: ev.value,
                log_det: fac.log_det,
                core_chol: fac.chol,
                obs_precision: fac.obs,
                iterations: iter,
                gradient_norm: gnorm,
            });
        }
        if iter == settings.max_iter {
            return Err(Error::Iteration { iterations: iter, gradient_norm: gnorm });
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let trial = &latent + &step * t;
            if let Ok(tr) = evaluate(model, &prior, &trial, theta) {
                if tr.value.is_finite() && tr.value >= ev.value - 1e-12 * scale {
                    next = Some((trial, tr));
                    break;
                }
            }
            t *= 0.5;
        }
        match next {
            Some((w, e)) => {
                latent = w;
                ev = e;
            }
            None => return Err(Error::Iteration { iterations: iter + 1, gradient_norm: gnorm }),
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Laplace approximation of `log π(θ, Y)`; exact for the Gaussian family.
pub fn laplace_log_marginal(model: &LatentModel, theta: &[f64]) -> Result<f64> {
    let approx = newton_mode(model, theta, None, NewtonSettings::default())?;
    Ok(laplace_from(&approx))
}

pub(crate) fn laplace_from(approx: &GaussianApprox) -> f64 {
    approx.log_joint + 0.5 * approx.latent_dim() as f64 * (2.0 * PI).ln() - 0.5 * approx.log_det
}

/// `λ_max / λ_min` of a symmetric positive-definite matrix, from its
/// singular values.
pub fn condition_number(precision: &DMatrix<f64>) -> f64 {
    let sv = precision.singular_values();
    sv.max() / sv.min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{KnotSet, OSplineBasis};
    use crate::inference::model::{HyperSetting, ModelSpec, SmoothSpec};
    use crate::prior::{ExponentialPrior, PriorTarget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigma_prior() -> ExponentialPrior {
        ExponentialPrior::new(1.5, PriorTarget::Sigma).unwrap()
    }

    fn toy(family: Family, n: usize, k: usize, p: usize, seed: u64) -> LatentModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|i| 10.0 * (i as f64 + 0.5) / n as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| match family {
                Family::Gaussian { .. } => (x / 2.0).sin() + 0.3 * rng.random::<f64>(),
                _ => (2.0 + (x / 3.0).sin() + rng.random::<f64>()).exp().round(),
            })
            .collect();
        let basis = OSplineBasis::new(p, KnotSet::equal(0.0, 10.0, k).unwrap()).unwrap();
        let mut spec = ModelSpec::new(xs, ys, family, SmoothSpec::OSpline(basis), sigma_prior());
        let labels: Vec<String> = (0..n).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
        let (v, _) = crate::inference::model::sum_coded_design(&labels).unwrap();
        spec.fixed_design = Some(v);
        LatentModel::new(spec).unwrap()
    }

    fn gaussian(n: usize, k: usize) -> LatentModel {
        toy(Family::Gaussian { noise_sd: HyperSetting::Fixed(0.4) }, n, k, 3, 1)
    }

    fn random_latent(model: &LatentModel, seed: u64, scale: f64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(model.latent_dim(), |_, _| scale * (rng.random::<f64>() - 0.5))
    }

    fn ln_fact(y: f64) -> f64 {
        (2..=(y as u64)).map(|i| (i as f64).ln()).sum()
    }

    /// Scalar-by-scalar reimplementation of the log joint.
    fn brute_log_joint(model: &LatentModel, w: &DVector<f64>, theta: &[f64]) -> f64 {
        let (m, n) = (model.core_dim(), model.n());
        let sigma = theta[0].exp();
        let mut prior_sds = Vec::new();
        let d = match &model.smooth {
            SmoothTerm::OSpline { precision, .. } => precision.clone(),
            _ => unreachable!(),
        };
        for i in 0..d.len() {
            prior_sds.push(sigma / d[i].sqrt());
        }
        prior_sds.extend(&model.poly_prior_sd);
        prior_sds.extend(&model.fixed_prior_sd);
        let phi = if model.has_observation_effects() { model.family_value(theta) } else { None };
        if let Some(phi) = phi {
            prior_sds.extend(std::iter::repeat_n(phi, n));
        }
        let mut total = 0.0;
        for (j, sd) in prior_sds.iter().enumerate() {
            total += -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (w[j] / sd).powi(2);
        }
        for i in 0..n {
            let mut eta = 0.0;
            for j in 0..m {
                eta += model.design[(i, j)] * w[j];
            }
            if phi.is_some() {
                eta += w[m + i];
            }
            let y = model.response[i];
            total += match model.family {
                Family::Gaussian { .. } => {
                    let k = model.family_value(theta).unwrap();
                    -0.5 * (2.0 * PI).ln() - k.ln() - 0.5 * ((y - eta) / k).powi(2)
                }
                _ => y * eta - eta.exp() - ln_fact(y),
            };
        }
        total + model.log_hyperprior(theta)
    }

    #[test]
    fn gaussian_zero_latent_zero_response() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 1.0, 3).unwrap()).unwrap();
        let spec = ModelSpec::new(
            vec![0.2, 0.5, 0.9],
            vec![0.0; 3],
            Family::Gaussian { noise_sd: HyperSetting::Fixed(0.5) },
            SmoothSpec::OSpline(basis.clone()),
            sigma_prior(),
        );
        let model = LatentModel::new(spec).unwrap();
        let theta = [0.0];
        let value = log_joint(&model, &DVector::zeros(5), &theta).unwrap();
        let d = basis.knot_set().weight_precision();
        let mut expected = 3.0 * (-0.5 * (2.0 * PI).ln() - 0.5f64.ln());
        expected += d.iter().map(|di| -0.5 * (2.0 * PI).ln() + 0.5 * di.ln()).sum::<f64>();
        expected += 2.0 * (-0.5 * (2.0 * PI).ln() - 0.5 * 1000f64.ln());
        expected += model.log_hyperprior(&theta);
        assert!((value - expected).abs() < 1e-12);
    }

    #[test]
    fn poisson_zero_predictor_contributes_minus_one() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 1.0, 2).unwrap()).unwrap();
        let spec = ModelSpec::new(
            vec![0.1, 0.6, 0.8, 1.0],
            vec![0.0; 4],
            Family::Poisson,
            SmoothSpec::OSpline(basis),
            sigma_prior(),
        );
        let model = LatentModel::new(spec).unwrap();
        let w = DVector::zeros(model.latent_dim());
        let theta = [0.3];
        let prior = model.latent_prior(&theta);
        let prior_only = -0.5 * 4.0 * (2.0 * PI).ln() + 0.5 * prior.log_det + model.log_hyperprior(&theta);
        let value = log_joint(&model, &w, &theta).unwrap();
        assert!((value - prior_only - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn log_joint_matches_scalar_oracle() {
        let families = [
            Family::Gaussian { noise_sd: HyperSetting::Fixed(0.7) },
            Family::Poisson,
            Family::PoissonOverdispersed { overdispersion_sd: HyperSetting::Estimated(sigma_prior()) },
        ];
        for (s, family) in families.into_iter().enumerate() {
            let model = toy(family, 12, 5, 3, s as u64);
            let theta: Vec<f64> = [0.2, -0.8][..model.theta_dim()].to_vec();
            let w = random_latent(&model, 10 + s as u64, 0.5);
            let a = log_joint(&model, &w, &theta).unwrap();
            let b = brute_log_joint(&model, &w, &theta);
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{family:?}: {a} vs {b}");
        }
    }

    #[test]
    fn rate_overflow_names_observation() {
        let model = toy(Family::Poisson, 6, 3, 2, 2);
        let mut w = DVector::zeros(model.latent_dim());
        w[model.poly_offset()] = 800.0;
        let err = log_joint(&model, &w, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("observation 0")), "{err}");
    }

    #[test]
    fn gaussian_mode_is_gls_and_one_step() {
        let model = gaussian(20, 6);
        let theta = [0.1];
        let init = random_latent(&model, 5, 4.0);
        let approx = newton_mode(&model, &theta, Some(&init), NewtonSettings::default()).unwrap();
        assert_eq!(approx.iterations, 1);
        let prior = model.latent_prior(&theta);
        let mut lhs = model.design.tr_mul(&model.design) / 0.16;
        prior.add_core_to(&mut lhs);
        let rhs = model.design.tr_mul(&DVector::from_column_slice(&model.response)) / 0.16;
        let gls = lhs.lu().solve(&rhs).unwrap();
        assert!((&approx.mode - &gls).amax() < 1e-8 * (1.0 + gls.amax()));
        let g = log_joint_gradient(&model, &approx.mode, &theta).unwrap();
        assert!(g.norm() <= 1e-8 * (1.0 + approx.log_joint.abs()));
    }

    #[test]
    fn poisson_all_zero_counts() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 1.0, 3).unwrap()).unwrap();
        let xs = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let spec = ModelSpec::new(xs, vec![0.0; 5], Family::Poisson, SmoothSpec::OSpline(basis), sigma_prior());
        let model = LatentModel::new(spec).unwrap();
        let approx = newton_mode(&model, &[0.0], None, NewtonSettings::default()).unwrap();
        let eta = &model.design * approx.core_mode();
        assert!(eta.iter().all(|e| e.is_finite() && *e < 0.0));
        assert!(approx.gradient_norm <= 1e-8 * (1.0 + approx.log_joint.abs()));
    }

    /// Central differences of the gradient, step `1e-4` times each
    /// coordinate's approximate posterior SD.
    fn fd_hessian(model: &LatentModel, w: &DVector<f64>, theta: &[f64], scale: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = w.len();
        let mut h = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let step = 1e-4 * scale[(j, j)].sqrt();
            let mut wp = w.clone();
            wp[j] += step;
            let mut wm = w.clone();
            wm[j] -= step;
            let gp = log_joint_gradient(model, &wp, theta).unwrap();
            let gm = log_joint_gradient(model, &wm, theta).unwrap();
            h.set_column(j, &(-(gp - gm) / (2.0 * step)));
        }
        h
    }

    #[test]
    fn assembled_hessian_matches_finite_differences() {
        let families = [
            Family::Gaussian { noise_sd: HyperSetting::Fixed(0.7) },
            Family::Poisson,
            Family::PoissonOverdispersed { overdispersion_sd: HyperSetting::Fixed(0.3) },
        ];
        for (s, family) in families.into_iter().enumerate() {
            let model = toy(family, 10, 4, 3, 20 + s as u64);
            let theta = [0.4];
            let approx = newton_mode(&model, &theta, None, NewtonSettings::default()).unwrap();
            let h = assemble_precision(&model, &approx.mode, &theta).unwrap();
            let cov = h.clone().try_inverse().unwrap();
            let fd = fd_hessian(&model, &approx.mode, &theta, &cov);
            let err = (&h - &fd).amax() / h.amax();
            assert!(err < 1e-5, "{family:?}: relative error {err}");
            let ld = h.clone().cholesky().unwrap().l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
            assert!((ld - approx.log_det).abs() < 1e-8 * ld.abs().max(1.0));
        }
    }

    #[test]
    fn structured_solve_matches_dense() {
        let model = toy(Family::PoissonOverdispersed { overdispersion_sd: HyperSetting::Fixed(0.5) }, 9, 4, 2, 3);
        let theta = [0.0];
        let w = random_latent(&model, 8, 0.2);
        let prior = model.latent_prior(&theta);
        let ev = evaluate(&model, &prior, &w, &theta).unwrap();
        let fac = factor(&model, &prior, &ev.curvature).unwrap();
        let step = newton_step(&model, &fac, &ev.gradient);
        let h = assemble_precision(&model, &w, &theta).unwrap();
        let dense = h.lu().solve(&ev.gradient).unwrap();
        assert!((&step - &dense).amax() < 1e-9 * dense.amax());
    }

    /// Dense Gaussian marginal `y ~ N(0, A Σ Aᵀ + κ² I)`.
    fn gaussian_marginal(model: &LatentModel, theta: &[f64], kappa: f64) -> f64 {
        let prior = model.latent_prior(theta);
        let mut q = DMatrix::zeros(model.core_dim(), model.core_dim());
        prior.add_core_to(&mut q);
        let sigma = q.try_inverse().unwrap();
        let n = model.n();
        let cov = &model.design * sigma * model.design.transpose() + DMatrix::identity(n, n) * kappa * kappa;
        let chol = cov.cholesky().unwrap();
        let y = DVector::from_column_slice(&model.response);
        let alpha = chol.solve(&y);
        let ld = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum::<f64>();
        -0.5 * y.dot(&alpha) - 0.5 * ld - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn laplace_is_exact_for_gaussian() {
        let basis = OSplineBasis::new(2, KnotSet::equal(0.0, 1.0, 3).unwrap()).unwrap();
        let xs = vec![0.1, 0.3, 0.45, 0.7, 0.95];
        let ys = vec![0.3, -0.2, 0.5, 1.1, 0.4];
        let spec = ModelSpec::new(
            xs,
            ys,
            Family::Gaussian { noise_sd: HyperSetting::Fixed(0.3) },
            SmoothSpec::OSpline(basis),
            sigma_prior(),
        );
        let model = LatentModel::new(spec).unwrap();
        for theta in [-1.0, 0.0, 0.7] {
            let la = laplace_log_marginal(&model, &[theta]).unwrap();
            let exact = gaussian_marginal(&model, &[theta], 0.3) + model.log_hyperprior(&[theta]);
            assert!((la - exact).abs() < 1e-8, "{la} vs {exact}");
        }
    }

    #[test]
    fn scaling_identity() {
        // Multiplying y, every prior SD, σ and κ by c changes the marginal
        // density of y by −n log c.
        let c: f64 = 3.0;
        let basis = OSplineBasis::new(3, KnotSet::equal(0.0, 2.0, 4).unwrap()).unwrap();
        let xs = vec![0.2, 0.6, 1.1, 1.5, 1.9, 2.0];
        let ys = [0.1, 0.4, -0.3, 0.2, 0.9, 1.2];
        let build = |scale: f64| {
            let mut spec = ModelSpec::new(
                xs.clone(),
                ys.iter().map(|y| y * scale).collect(),
                Family::Gaussian { noise_sd: HyperSetting::Fixed(0.2 * scale) },
                SmoothSpec::OSpline(basis.clone()),
                sigma_prior(),
            );
            spec.poly_prior_sd = Some(vec![5.0 * scale, 2.0 * scale, 1.0 * scale]);
            LatentModel::new(spec).unwrap()
        };
        let (m1, mc) = (build(1.0), build(c));
        let theta = 0.3;
        let a = laplace_log_marginal(&m1, &[theta]).unwrap() - m1.log_hyperprior(&[theta]);
        let b = laplace_log_marginal(&mc, &[theta + c.ln()]).unwrap() - mc.log_hyperprior(&[theta + c.ln()]);
        assert!((b - (a - 6.0 * c.ln())).abs() < 1e-9);
    }

    #[test]
    fn poisson_laplace_close_to_nested_quadrature() {
        // n = 4, k = 2, p = 1: latent (w1, w2, γ0), integrated on a product rule.
        let basis = OSplineBasis::new(1, KnotSet::equal(0.0, 1.0, 2).unwrap()).unwrap();
        let spec = ModelSpec::new(
            vec![0.1, 0.4, 0.6, 0.9],
            vec![120.0, 180.0, 250.0, 310.0],
            Family::Poisson,
            SmoothSpec::OSpline(basis),
            sigma_prior(),
        );
        let mut spec = spec;
        spec.poly_prior_sd = Some(vec![3.0]);
        let model = LatentModel::new(spec).unwrap();
        let theta = [-0.5];
        let approx = newton_mode(&model, &theta, None, NewtonSettings::default()).unwrap();
        let cov = approx.core_covariance();
        let l = cov.clone().cholesky().unwrap().l();
        let rule = crate::quadrature::GaussHermite::new(30).unwrap();
        let mut terms = Vec::new();
        for (i, zi) in rule.nodes.iter().enumerate() {
            for (j, zj) in rule.nodes.iter().enumerate() {
                for (k, zk) in rule.nodes.iter().enumerate() {
                    let z = DVector::from_column_slice(&[*zi, *zj, *zk]);
                    let w = &approx.mode + &l * &z;
                    let lw = rule.weights[i].ln() + rule.weights[j].ln() + rule.weights[k].ln();
                    terms.push(lw + 0.5 * z.norm_squared() + log_joint(&model, &w, &theta).unwrap());
                }
            }
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let brute = max
            + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            + l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
            + 1.5 * (2.0 * PI).ln();
        let la = laplace_from(&approx);
        assert!((la - brute).abs() < 1e-3, "{la} vs {brute}");
    }

    #[test]
    fn condition_number_examples() {
        assert_eq!(condition_number(&DMatrix::identity(4, 4)), 1.0);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[100.0, 1.0]));
        assert!((condition_number(&d) - 100.0).abs() < 1e-12);
    }
}
