//! Exact covariance of the integrated Wiener process and its derivatives,
//! dense Gaussian-process regression, and brute-force quadrature oracles.
//!
//! For `W_p` started at the origin,
//!
//! ```text
//! Cov[W^(q1)(s), W^(q2)(t)] = σ² ∫_0^{min(s,t)} (s−u)^a (t−u)^b / (a! b!) du,
//!     a = p − q1 − 1,  b = p − q2 − 1.
//! ```
//!
//! Substituting `w = min(s,t) − u` leaves `w^a (d + w)^b` (or the mirror
//! image) with `d = |s − t|`, whose binomial expansion has only positive
//! terms, so the closed form is free of cancellation.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_traits::{FromPrimitive, Num};
use serde::Serialize;

use crate::basis::{check_order, factorial, polynomial_design, OSplineBasis};
use crate::error::{invalid, Error, Result};
use crate::quadrature::integrate_with_breaks;

/// A covariance function of a process and its derivatives.
pub trait CovarianceFn {
    /// Number of derivative orders available (`q < order`).
    fn order(&self) -> usize;
    /// `Cov[f^(q1)(s), f^(q2)(t)]`.
    fn cov(&self, s: f64, t: f64, q1: usize, q2: usize) -> Result<f64>;
}

/// Exact kernel of `σ W_p` started at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IwpKernel {
    order: usize,
    sigma: f64,
    origin: f64,
}

impl IwpKernel {
    pub fn new(order: usize, sigma: f64) -> Result<Self> {
        Self::with_origin(order, sigma, 0.0)
    }

    pub fn with_origin(order: usize, sigma: f64, origin: f64) -> Result<Self> {
        check_order(order)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid(format!("sigma must be finite and non-negative, got {sigma}"));
        }
        if !origin.is_finite() {
            return invalid("origin must be finite");
        }
        Ok(Self { order, sigma, origin })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::with_origin(self.order, sigma, self.origin)
    }

    /// Closed-form covariance; see the module docs.
    pub fn exact_cov(&self, s: f64, t: f64, q1: usize, q2: usize) -> Result<f64> {
        if q1 >= self.order || q2 >= self.order {
            return invalid(format!("derivative orders ({q1}, {q2}) must be below the order {}", self.order));
        }
        let (u, v) = (s - self.origin, t - self.origin);
        if !(u >= 0.0 && v >= 0.0) {
            return invalid(format!("locations ({s}, {t}) precede the origin {}", self.origin));
        }
        Ok(self.sigma * self.sigma * unit_cov(self.order, q1, q2, u, v))
    }
}

impl CovarianceFn for IwpKernel {
    fn order(&self) -> usize {
        self.order
    }

    fn cov(&self, s: f64, t: f64, q1: usize, q2: usize) -> Result<f64> {
        self.exact_cov(s, t, q1, q2)
    }
}

/// Unit-σ covariance for offsets `u, v ≥ 0` from the origin, generic over the
/// scalar so it can also be evaluated in exact rational arithmetic.
pub(crate) fn unit_cov<T>(p: usize, q1: usize, q2: usize, u: T, v: T) -> T
where
    T: Num + Clone + PartialOrd + FromPrimitive,
{
    let a = p - q1 - 1;
    let b = p - q2 - 1;
    // Exponent on w and on (d + w) after the substitution.
    let (m, d, pow_w, pow_dw) = if u <= v { (u.clone(), v - u, a, b) } else { (v.clone(), u - v, b, a) };
    let int = |x: u64| T::from_u64(x).expect("small integer");
    let mut total = T::zero();
    let mut d_pow = T::one();
    // Σ_j C(pow_dw, j) d^{pow_dw − j} m^{pow_w + j + 1} / (pow_w + j + 1), summed from j = pow_dw down.
    for j in (0..=pow_dw).rev() {
        let binom = int(binomial(pow_dw, j));
        let e = pow_w + j + 1;
        let mut m_pow = T::one();
        for _ in 0..e {
            m_pow = m_pow * m.clone();
        }
        total = total + binom * d_pow.clone() * m_pow / int(e as u64);
        d_pow = d_pow * d.clone();
    }
    let denom = T::from_f64(factorial(a) * factorial(b)).expect("exact factorial");
    total / denom
}

fn binomial(n: usize, k: usize) -> u64 {
    let mut c = 1u64;
    for i in 0..k {
        c = c * (n - i) as u64 / (i + 1) as u64;
    }
    c
}

/// Covariance of the O-spline approximation `σ Σ w_i φ_i`, weights with
/// precision `d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OSplineKernel {
    basis: OSplineBasis,
    sigma: f64,
}

impl OSplineKernel {
    pub fn new(basis: OSplineBasis, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return invalid(format!("sigma must be finite and non-negative, got {sigma}"));
        }
        Ok(Self { basis, sigma })
    }

    pub fn basis(&self) -> &OSplineBasis {
        &self.basis
    }
}

impl CovarianceFn for OSplineKernel {
    fn order(&self) -> usize {
        self.basis.order()
    }

    fn cov(&self, s: f64, t: f64, q1: usize, q2: usize) -> Result<f64> {
        ospline_cov(&self.basis, self.sigma, s, t, q1, q2)
    }
}

/// `σ² Σ_i φ_i^(q1)(s) φ_i^(q2)(t) / d_i`.
pub fn ospline_cov(basis: &OSplineBasis, sigma: f64, s: f64, t: f64, q1: usize, q2: usize) -> Result<f64> {
    if q1 >= basis.order() || q2 >= basis.order() {
        return invalid(format!("derivative orders ({q1}, {q2}) must be below the order {}", basis.order()));
    }
    let d = basis.knot_set().spacings();
    let mut acc = 0.0;
    for (i, di) in d.iter().enumerate() {
        let a = basis.eval(i, s, q1)?;
        if a == 0.0 {
            // Later cells start further right, so their functions vanish too.
            break;
        }
        acc += a * basis.eval(i, t, q2)? / di;
    }
    Ok(sigma * sigma * acc)
}

/// Repeated integral `I_s^{a} I_t^{b} cov` from zero, evaluated by adaptive
/// quadrature with absolute tolerance 1e-9.
///
/// Each repeated integral is collapsed with Cauchy's formula
/// `I^a f(s) = ∫_0^s (s−u)^{a−1}/(a−1)! f(u) du`, leaving at most a
/// two-dimensional integral. The inner integral is split on the diagonal and
/// at `breaks`, where `cov` may have kinks.
pub fn integrate_cov_oracle<F>(cov: F, s: f64, t: f64, steps: (usize, usize), breaks: &[f64]) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
{
    const TOL: f64 = 1e-9;
    let (a, b) = steps;
    if !(s >= 0.0 && t >= 0.0 && s.is_finite() && t.is_finite()) {
        return invalid(format!("oracle locations must be finite and non-negative, got ({s}, {t})"));
    }
    let weight = |n: usize, end: f64, x: f64| (end - x).powi(n as i32 - 1) / factorial(n - 1);
    let inner_tol = TOL * 1e-2 / (1.0 + s.max(t)).powi(a as i32 + 1);

    let inner = |u: f64| -> Result<f64> {
        if b == 0 {
            return Ok(cov(u, t));
        }
        let mut cuts = breaks.to_vec();
        cuts.push(u);
        Ok(integrate_with_breaks(|v| weight(b, t, v) * cov(u, v), 0.0, t, &cuts, inner_tol)?.value)
    };

    if a == 0 {
        return inner(s);
    }
    let mut failure = None;
    let mut cuts = breaks.to_vec();
    cuts.push(t);
    let est = integrate_with_breaks(
        |u| match inner(u) {
            Ok(v) => weight(a, s, u) * v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        0.0,
        s,
        &cuts,
        TOL,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(est.value),
    }
}

/// Covariances of exact and (optionally) approximate processes on a grid.
#[derive(Debug, Clone)]
pub struct CovGrid {
    pub s_values: Vec<f64>,
    pub t_values: Vec<f64>,
    pub derivative_orders: (usize, usize),
    pub exact: DMatrix<f64>,
    pub approx: Option<DMatrix<f64>>,
}

impl CovGrid {
    /// Exact covariances only.
    pub fn exact(kernel: &IwpKernel, s_values: &[f64], t_values: &[f64], q1: usize, q2: usize) -> Result<Self> {
        let exact = exact_block(kernel, s_values, t_values, q1, q2)?;
        Ok(Self {
            s_values: s_values.to_vec(),
            t_values: t_values.to_vec(),
            derivative_orders: (q1, q2),
            exact,
            approx: None,
        })
    }

    /// Exact covariances against the O-spline approximation of the same order.
    pub fn compare(
        kernel: &IwpKernel,
        basis: &OSplineBasis,
        s_values: &[f64],
        t_values: &[f64],
        q1: usize,
        q2: usize,
    ) -> Result<Self> {
        if basis.order() != kernel.order() {
            return invalid(format!("basis order {} differs from kernel order {}", basis.order(), kernel.order()));
        }
        let mut grid = Self::exact(kernel, s_values, t_values, q1, q2)?;
        grid.approx = Some(ospline_block(basis, kernel.sigma(), s_values, t_values, q1, q2)?);
        Ok(grid)
    }

    /// Largest absolute difference between exact and approximate entries.
    pub fn sup_error(&self) -> Option<f64> {
        self.approx.as_ref().map(|a| self.exact.iter().zip(a.iter()).fold(0.0, |m, (e, a)| f64::max(m, (e - a).abs())))
    }

    /// True when the exact block is symmetric and positive semi-definite up
    /// to `−1e−8 · λ_max`. Only meaningful for matched grids and orders.
    pub fn is_symmetric_psd(&self) -> bool {
        let m = &self.exact;
        if m.nrows() != m.ncols() {
            return false;
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (m - m.transpose()).amax() > 1e-12 * scale {
            return false;
        }
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = eig.max();
        eig.min() >= -1e-8 * max.abs()
    }

    /// CSV with columns `s,t,q1,q2,exact,approx,abs_err`; the last two are
    /// empty when there is no approximation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "t", "q1", "q2", "exact", "approx", "abs_err"])?;
        let (q1, q2) = self.derivative_orders;
        for (i, s) in self.s_values.iter().enumerate() {
            for (j, t) in self.t_values.iter().enumerate() {
                let e = self.exact[(i, j)];
                let (a, err) = match &self.approx {
                    Some(m) => (m[(i, j)].to_string(), (e - m[(i, j)]).abs().to_string()),
                    None => (String::new(), String::new()),
                };
                w.write_record([s.to_string(), t.to_string(), q1.to_string(), q2.to_string(), e.to_string(), a, err])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn exact_block(kernel: &IwpKernel, s_values: &[f64], t_values: &[f64], q1: usize, q2: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(s_values.len(), t_values.len());
    for (i, &s) in s_values.iter().enumerate() {
        for (j, &t) in t_values.iter().enumerate() {
            m[(i, j)] = kernel.exact_cov(s, t, q1, q2)?;
        }
    }
    Ok(m)
}

fn ospline_block(
    basis: &OSplineBasis,
    sigma: f64,
    s_values: &[f64],
    t_values: &[f64],
    q1: usize,
    q2: usize,
) -> Result<DMatrix<f64>> {
    let phi_s = basis.design_matrix(s_values, q1)?.values;
    let phi_t = basis.design_matrix(t_values, q2)?.values;
    let inv_d = DVector::from_iterator(basis.len(), basis.knot_set().spacings().iter().map(|d| sigma * sigma / d));
    let scaled = DMatrix::from_fn(phi_s.nrows(), phi_s.ncols(), |r, c| phi_s[(r, c)] * inv_d[c]);
    Ok(scaled * phi_t.transpose())
}

/// `grid_density + 1` equally spaced points over `[a, b]`.
pub fn regular_grid(a: f64, b: f64, grid_density: usize) -> Vec<f64> {
    (0..=grid_density)
        .map(|i| if i == grid_density { b } else { a + (b - a) * i as f64 / grid_density as f64 })
        .collect()
}

/// `sup |C^(q1,q2) − C_k^(q1,q2)|` over a regular grid on `region`, with
/// `σ = 1` and `k` equally spaced knots. `grid_density` counts grid
/// intervals per axis and must be at least `10 k`.
pub fn sup_cov_error(p: usize, k: usize, region: (f64, f64), grid_density: usize, q1: usize, q2: usize) -> Result<f64> {
    if grid_density < 10 * k {
        return invalid(format!("grid density {grid_density} must be at least 10·k = {}", 10 * k));
    }
    let kernel = IwpKernel::with_origin(p, 1.0, region.0)?;
    let basis = OSplineBasis::new(p, crate::basis::KnotSet::equal(region.0, region.1, k)?)?;
    let grid = regular_grid(region.0, region.1, grid_density);
    let cg = CovGrid::compare(&kernel, &basis, &grid, &grid, q1, q2)?;
    Ok(cg.sup_error().expect("comparison grid"))
}

/// Gaussian observations for dense GP regression: `y = f(x) + Σ γ_l (x −
/// origin)^l + ε`, `γ_l ~ N(0, τ_l²)`, `ε ~ N(0, noise_sd²)`.
#[derive(Debug, Clone)]
pub struct GpData {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub noise_sd: f64,
    pub poly_prior_sd: Vec<f64>,
    pub origin: f64,
}

/// Pointwise posterior summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpPosterior {
    pub locations: Vec<(f64, usize)>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

struct DenseGp {
    chol: Cholesky<f64, Dyn>,
    /// A⁻¹ y.
    alpha: DVector<f64>,
    /// A⁻¹ Hᵀ for the polynomial design H (m × n).
    ainv_ht: DMatrix<f64>,
    trend_chol: Option<Cholesky<f64, Dyn>>,
    trend_mean: DVector<f64>,
    log_det_a: f64,
    log_det_b: f64,
    b_vec: DVector<f64>,
}

fn condition_of(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    sv.max() / sv.min()
}

impl DenseGp {
    fn new(cov: &dyn CovarianceFn, data: &GpData) -> Result<Self> {
        let n = data.xs.len();
        if data.ys.len() != n {
            return invalid(format!("{} locations but {} responses", n, data.ys.len()));
        }
        if !(data.noise_sd > 0.0 && data.noise_sd.is_finite()) {
            return invalid(format!("noise SD must be positive, got {}", data.noise_sd));
        }
        if data.poly_prior_sd.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return invalid("polynomial prior SDs must be positive");
        }
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let c = cov.cov(data.xs[i], data.xs[j], 0, 0)?;
                a[(i, j)] = c;
                a[(j, i)] = c;
            }
            a[(i, i)] += data.noise_sd * data.noise_sd;
        }
        let chol = match Cholesky::new(a.clone()) {
            Some(c) => c,
            None => {
                return Err(Error::Numeric(format!(
                    "Cholesky factorization of the {n}×{n} GP covariance failed (condition number {:.3e})",
                    condition_of(&a)
                )))
            }
        };
        let y = DVector::from_column_slice(&data.ys);
        let alpha = chol.solve(&y);
        let log_det_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let m = data.poly_prior_sd.len();
        let shifted: Vec<f64> = data.xs.iter().map(|x| x - data.origin).collect();
        let h = if m > 0 { polynomial_design(&shifted, m, 0)?.transpose() } else { DMatrix::zeros(0, n) };
        let ainv_ht = chol.solve(&h.transpose());
        let mut prec = &h * &ainv_ht;
        for l in 0..m {
            prec[(l, l)] += 1.0 / data.poly_prior_sd[l].powi(2);
        }
        let b_vec = &h * &alpha;
        let (trend_chol, trend_mean) = if m > 0 {
            let c = Cholesky::new(prec.clone()).ok_or_else(|| {
                Error::Numeric(format!(
                    "trend posterior precision is not positive definite (condition number {:.3e})",
                    condition_of(&prec)
                ))
            })?;
            let mean = c.solve(&b_vec);
            (Some(c), mean)
        } else {
            (None, DVector::zeros(0))
        };
        let log_det_b = data.poly_prior_sd.iter().map(|t| 2.0 * t.ln()).sum();
        Ok(Self { chol, alpha, ainv_ht, trend_chol, trend_mean, log_det_a, log_det_b, b_vec })
    }

    fn log_marginal(&self, ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let y = DVector::from_column_slice(ys);
        let mut quad = y.dot(&self.alpha);
        let mut log_det = self.log_det_a + self.log_det_b;
        if let Some(c) = &self.trend_chol {
            quad -= self.b_vec.dot(&self.trend_mean);
            log_det += 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        -0.5 * (quad + log_det + n * (2.0 * std::f64::consts::PI).ln())
    }

    fn predict(&self, cov: &dyn CovarianceFn, data: &GpData, x: f64, q: usize) -> Result<(f64, f64)> {
        let n = data.xs.len();
        let kstar =
            DVector::from_iterator(n, data.xs.iter().map(|&xi| cov.cov(x, xi, q, 0)).collect::<Result<Vec<_>>>()?);
        let kss = cov.cov(x, x, q, q)?;
        let v = self.chol.solve(&kstar);
        let mut mean = kstar.dot(&self.alpha);
        let mut var = kss - kstar.dot(&v);
        let m = data.poly_prior_sd.len();
        if m > 0 {
            let hstar = if q < m {
                DVector::from_iterator(m, polynomial_design(&[x - data.origin], m, q)?.row(0).iter().copied())
            } else {
                DVector::zeros(m)
            };
            let r = hstar - &self.ainv_ht.transpose() * &kstar;
            mean += r.dot(&self.trend_mean);
            let trend = self.trend_chol.as_ref().expect("trend factor");
            var += r.dot(&trend.solve(&r));
        }
        Ok((mean, var.max(0.0).sqrt()))
    }
}

fn prior_predict(cov: &dyn CovarianceFn, data: &GpData, x: f64, q: usize) -> Result<(f64, f64)> {
    let mut var = cov.cov(x, x, q, q)?;
    let m = data.poly_prior_sd.len();
    if m > q {
        let h = polynomial_design(&[x - data.origin], m, q)?;
        for l in 0..m {
            var += (data.poly_prior_sd[l] * h[(0, l)]).powi(2);
        }
    }
    Ok((0.0, var.sqrt()))
}

/// Dense GP regression: posterior mean and SD of `f^(q)(x)` plus trend for
/// each requested `(x, q)`, conditioning on Gaussian observations. The trend
/// coefficients are integrated out explicitly, which keeps vague trend priors
/// from wrecking the conditioning.
pub fn exact_gp_fit(cov: &dyn CovarianceFn, data: &GpData, predict_at: &[(f64, usize)]) -> Result<GpPosterior> {
    if let Some(&(_, q)) = predict_at.iter().find(|(_, q)| *q >= cov.order()) {
        return invalid(format!("derivative order {q} must be below the order {}", cov.order()));
    }
    let mut mean = Vec::with_capacity(predict_at.len());
    let mut sd = Vec::with_capacity(predict_at.len());
    if data.xs.is_empty() {
        for &(x, q) in predict_at {
            let (m, s) = prior_predict(cov, data, x, q)?;
            mean.push(m);
            sd.push(s);
        }
    } else {
        let gp = DenseGp::new(cov, data)?;
        for &(x, q) in predict_at {
            let (m, s) = gp.predict(cov, data, x, q)?;
            mean.push(m);
            sd.push(s);
        }
    }
    Ok(GpPosterior { locations: predict_at.to_vec(), mean, sd })
}

/// Log marginal likelihood `log p(y)` of the dense GP with the trend
/// integrated out.
pub fn exact_gp_log_marginal(cov: &dyn CovarianceFn, data: &GpData) -> Result<f64> {
    if data.xs.is_empty() {
        return Ok(0.0);
    }
    Ok(DenseGp::new(cov, data)?.log_marginal(&data.ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::KnotSet;
    use num_rational::BigRational;

    fn iwp(p: usize) -> IwpKernel {
        IwpKernel::new(p, 1.0).unwrap()
    }

    #[test]
    fn exact_cov_examples() {
        assert!((iwp(1).exact_cov(0.3, 0.7, 0, 0).unwrap() - 0.3).abs() < 1e-15);
        assert!((iwp(2).exact_cov(1.0, 1.0, 0, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        for p in 1..=5 {
            let k = IwpKernel::new(p, 0.0).unwrap();
            assert_eq!(k.exact_cov(1.3, 2.1, 0, 0).unwrap(), 0.0);
        }
        assert!(iwp(2).exact_cov(1.0, 1.0, 2, 0).is_err());
        assert!(iwp(2).exact_cov(-1.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn exact_cov_matches_quadrature() {
        let direct = crate::quadrature::integrate(|u: f64| (1.0 - u).powi(2), 0.0, 1.0, 1e-12).unwrap();
        assert!((iwp(2).exact_cov(1.0, 1.0, 0, 0).unwrap() - direct.value).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let v = integrate_cov_oracle(|s: f64, t: f64| s.min(t), 1.0, 1.0, (1, 1), &[]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
        let v = integrate_cov_oracle(|_, _| 0.0, 1.0, 2.0, (2, 3), &[]).unwrap();
        assert_eq!(v, 0.0);
        let v = integrate_cov_oracle(|_, _| 1.0, 2.0, 3.0, (1, 1), &[]).unwrap();
        assert!((v - 6.0).abs() < 1e-12);
        let v = integrate_cov_oracle(|s: f64, t: f64| s.min(t), 0.4, 0.9, (0, 0), &[]).unwrap();
        assert_eq!(v, 0.4);
    }

    #[test]
    fn exact_cov_equals_repeated_integration_of_brownian_cov() {
        let pts = [0.0, 0.15, 0.5, 0.77, 1.0];
        for p in 1..=4 {
            for &s in &pts {
                for &t in &pts {
                    let oracle = integrate_cov_oracle(|u: f64, v: f64| u.min(v), s, t, (p - 1, p - 1), &[]).unwrap();
                    let exact = iwp(p).exact_cov(s, t, 0, 0).unwrap();
                    assert!((oracle - exact).abs() < 1e-7, "p={p} s={s} t={t}: {oracle} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn cross_cov_equals_partial_integration() {
        // Cov[W^(q1)(s), W^(q2)(t)] = I_s^{p−1−q1} I_t^{p−1−q2} min.
        let p = 4;
        for q1 in 0..p {
            for q2 in 0..p {
                for &(s, t) in &[(0.3, 0.8), (0.9, 0.2), (0.6, 0.6)] {
                    let oracle =
                        integrate_cov_oracle(|u: f64, v: f64| u.min(v), s, t, (p - 1 - q1, p - 1 - q2), &[]).unwrap();
                    let exact = iwp(p).exact_cov(s, t, q1, q2).unwrap();
                    assert!((oracle - exact).abs() < 1e-7, "q=({q1},{q2})");
                }
            }
        }
    }

    #[test]
    fn derivative_of_iwp_is_lower_order_iwp() {
        for p in 2..=5 {
            for q2 in 0..p {
                for q1 in q2..p {
                    for &(s, t) in &[(0.4, 1.7), (2.0, 0.3), (1.1, 1.1)] {
                        let lhs = iwp(p).exact_cov(s, t, q1, q2).unwrap();
                        let rhs = iwp(p - q2).exact_cov(s, t, q1 - q2, 0).unwrap();
                        assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn symmetry_under_swap() {
        let k = IwpKernel::new(4, 1.7).unwrap();
        for q1 in 0..4 {
            for q2 in 0..4 {
                let a = k.exact_cov(0.8, 2.3, q1, q2).unwrap();
                let b = k.exact_cov(2.3, 0.8, q2, q1).unwrap();
                assert!((a - b).abs() <= 1e-14 * a.abs());
            }
        }
    }

    #[test]
    fn rational_and_float_agree() {
        let u = BigRational::from_float(0.7).unwrap();
        let v = BigRational::from_float(2.25).unwrap();
        for p in 1..=5 {
            for q1 in 0..p {
                for q2 in 0..p {
                    let r: f64 = num_traits::ToPrimitive::to_f64(&unit_cov(p, q1, q2, u.clone(), v.clone())).unwrap();
                    let f = unit_cov(p, q1, q2, 0.7, 2.25);
                    assert!((r - f).abs() <= 1e-14 * r.abs());
                }
            }
        }
    }

    #[test]
    fn cov_grid_is_symmetric_psd() {
        let xs: Vec<f64> = (0..30).map(|i| 0.1 + i as f64 * 0.1).collect();
        for p in 1..=4 {
            for q in 0..p {
                let g = CovGrid::exact(&iwp(p), &xs, &xs, q, q).unwrap();
                assert!(g.is_symmetric_psd(), "p={p} q={q}");
            }
        }
    }

    #[test]
    fn ospline_cov_examples() {
        let b = OSplineBasis::new(1, KnotSet::equal(0.0, 1.0, 10).unwrap()).unwrap();
        assert!((ospline_cov(&b, 1.0, 0.3, 0.7, 0, 0).unwrap() - 0.3).abs() < 1e-12);
        // The order-1 basis is linear inside its cell, so across cells the
        // approximation reproduces min(s, t) exactly.
        assert!((ospline_cov(&b, 1.0, 0.35, 0.7, 0, 0).unwrap() - 0.35).abs() < 1e-12);
        // Within a cell it falls short: l + (s − l)(t − l)/d.
        assert!((ospline_cov(&b, 1.0, 0.35, 0.38, 0, 0).unwrap() - (0.3 + 0.05 * 0.08 / 0.1)).abs() < 1e-12);
        assert_eq!(ospline_cov(&b, 0.0, 0.35, 0.7, 0, 0).unwrap(), 0.0);
        assert!(ospline_cov(&b, 1.0, 0.35, 0.7, 1, 0).is_err());
    }

    #[test]
    fn ospline_cov_matches_block() {
        let b = OSplineBasis::new(3, KnotSet::equal(0.0, 2.0, 7).unwrap()).unwrap();
        let xs = [0.0, 0.3, 1.1, 2.0];
        let blk = ospline_block(&b, 1.3, &xs, &xs, 1, 2).unwrap();
        for (i, &s) in xs.iter().enumerate() {
            for (j, &t) in xs.iter().enumerate() {
                let v = ospline_cov(&b, 1.3, s, t, 1, 2).unwrap();
                assert!((blk[(i, j)] - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn sup_error_examples() {
        let e10 = sup_cov_error(1, 10, (0.0, 1.0), 100, 0, 0).unwrap();
        assert!(e10 <= 0.2);
        let e20 = sup_cov_error(1, 20, (0.0, 1.0), 200, 0, 0).unwrap();
        let ratio = e10 / e20;
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
        for p in 2..=3 {
            for k in [3, 8] {
                assert!(sup_cov_error(p, k, (0.0, 1.0), 10 * k, 0, 0).unwrap() <= 2.0 / k as f64);
            }
        }
        assert!(sup_cov_error(1, 10, (0.0, 1.0), 99, 0, 0).is_err());
    }

    #[test]
    fn csv_output() {
        let b = OSplineBasis::new(2, KnotSet::equal(0.0, 1.0, 2).unwrap()).unwrap();
        let g = CovGrid::compare(&iwp(2), &b, &[0.5, 1.0], &[1.0], 0, 1).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "s,t,q1,q2,exact,approx,abs_err");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.5,1,0,1,"));
    }

    fn toy_data(n: usize) -> GpData {
        let xs: Vec<f64> = (1..=n).map(|i| i as f64 * 0.2).collect();
        let ys = xs.iter().map(|x: &f64| (x * 1.3).sin()).collect();
        GpData { xs, ys, noise_sd: 0.3, poly_prior_sd: vec![2.0, 1.5], origin: 0.0 }
    }

    /// Direct dense formulas with the trend folded into the covariance.
    fn naive_gp(cov: &dyn CovarianceFn, data: &GpData, x: f64, q: usize) -> (f64, f64, f64) {
        let n = data.xs.len();
        let m = data.poly_prior_sd.len();
        let full = |s: f64, t: f64, q1: usize, q2: usize| {
            let mut c = cov.cov(s, t, q1, q2).unwrap();
            for l in 0..m {
                let ds = if l >= q1 { factorial(l) / factorial(l - q1) * s.powi((l - q1) as i32) } else { 0.0 };
                let dt = if l >= q2 { factorial(l) / factorial(l - q2) * t.powi((l - q2) as i32) } else { 0.0 };
                c += data.poly_prior_sd[l].powi(2) * ds * dt;
            }
            c
        };
        let mut a = DMatrix::from_fn(n, n, |i, j| full(data.xs[i], data.xs[j], 0, 0));
        for i in 0..n {
            a[(i, i)] += data.noise_sd.powi(2);
        }
        let ks = DVector::from_fn(n, |i, _| full(x, data.xs[i], q, 0));
        let ainv = a.clone().try_inverse().unwrap();
        let y = DVector::from_column_slice(&data.ys);
        let mean = ks.dot(&(&ainv * &y));
        let var = full(x, x, q, q) - ks.dot(&(&ainv * &ks));
        let logml = -0.5 * (y.dot(&(&ainv * &y)) + a.determinant().ln() + n as f64 * (2.0 * std::f64::consts::PI).ln());
        (mean, var.sqrt(), logml)
    }

    #[test]
    fn gp_fit_matches_naive_formulas() {
        let data = toy_data(12);
        let k = IwpKernel::new(2, 0.8).unwrap();
        let post = exact_gp_fit(&k, &data, &[(0.5, 0), (1.3, 1), (2.4, 0)]).unwrap();
        for (i, &(x, q)) in post.locations.iter().enumerate() {
            let (m, s, _) = naive_gp(&k, &data, x, q);
            assert!((post.mean[i] - m).abs() < 1e-9);
            assert!((post.sd[i] - s).abs() < 1e-9);
        }
        let (_, _, lml) = naive_gp(&k, &data, 1.0, 0);
        assert!((exact_gp_log_marginal(&k, &data).unwrap() - lml).abs() < 1e-9);
    }

    #[test]
    fn gp_prior_predictive_without_data() {
        let data =
            GpData { xs: vec![], ys: vec![], noise_sd: 1.0, poly_prior_sd: vec![1000f64.sqrt(); 3], origin: 0.0 };
        let k = iwp(3);
        let post = exact_gp_fit(&k, &data, &[(1.5, 0), (2.0, 1)]).unwrap();
        assert_eq!(post.mean, vec![0.0, 0.0]);
        let v0 = k.exact_cov(1.5, 1.5, 0, 0).unwrap() + 1000.0 * (1.0 + 1.5f64.powi(2) + 1.5f64.powi(4));
        assert!((post.sd[0].powi(2) - v0).abs() < 1e-9 * v0);
        let v1 = k.exact_cov(2.0, 2.0, 1, 1).unwrap() + 1000.0 * (1.0 + 16.0);
        assert!((post.sd[1].powi(2) - v1).abs() < 1e-9 * v1);
    }

    #[test]
    fn gp_uninformative_noise() {
        let mut data = toy_data(10);
        data.noise_sd = 1e8;
        let post = exact_gp_fit(&iwp(3), &data, &[(0.3, 0), (1.0, 1), (1.9, 2)]).unwrap();
        assert!(post.mean.iter().all(|m| m.abs() < 1e-4));
    }

    #[test]
    fn gp_errors() {
        let mut data = toy_data(5);
        assert!(exact_gp_fit(&iwp(2), &data, &[(0.3, 2)]).is_err());
        data.noise_sd = 0.0;
        assert!(exact_gp_fit(&iwp(2), &data, &[(0.3, 0)]).is_err());
    }
}
