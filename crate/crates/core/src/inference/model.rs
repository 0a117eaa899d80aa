use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::basis::{polynomial_design, OSplineBasis};
use crate::error::{invalid, Error, Result};
use crate::gp_exact::unit_cov;
use crate::prior::ExponentialPrior;

/// Default prior variance of the polynomial coefficients.
pub const DEFAULT_POLY_PRIOR_VAR: f64 = 1000.0;
/// Default prior SD of fixed effects (variance 100).
pub const DEFAULT_FIXED_PRIOR_SD: f64 = 10.0;

/// A family hyperparameter that is either held fixed or integrated over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum HyperSetting {
    Fixed(f64),
    Estimated(ExponentialPrior),
}

/// Observation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `y ~ N(η, κ²)`.
    Gaussian { noise_sd: HyperSetting },
    /// `y ~ Poisson(exp η)`.
    Poisson,
    /// `y ~ Poisson(exp(η + ε))`, `ε ~ N(0, φ²)` per observation.
    PoissonOverdispersed { overdispersion_sd: HyperSetting },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian { .. } => "gaussian",
            Family::Poisson => "poisson",
            Family::PoissonOverdispersed { .. } => "poisson-od",
        }
    }

    fn hyper(&self) -> Option<HyperSetting> {
        match self {
            Family::Gaussian { noise_sd } => Some(*noise_sd),
            Family::Poisson => None,
            Family::PoissonOverdispersed { overdispersion_sd } => Some(*overdispersion_sd),
        }
    }
}

/// Which prior represents the smooth function.
#[derive(Debug, Clone)]
pub enum SmoothSpec {
    /// O-spline approximation on the basis's knots.
    OSpline(OSplineBasis),
    /// Exact `W_p` evaluated at the distinct observation locations, with a
    /// dense covariance. Region gives the origin and the admissible range.
    Exact { order: usize, region: (f64, f64) },
}

/// Everything needed to build a [`LatentModel`].
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub xs: Vec<f64>,
    pub response: Vec<f64>,
    pub family: Family,
    pub smooth: SmoothSpec,
    /// SDs `τ_l` of the polynomial coefficients; defaults to `sqrt(1000)`.
    pub poly_prior_sd: Option<Vec<f64>>,
    /// Fixed-effect design `V` (n × r), optional.
    pub fixed_design: Option<DMatrix<f64>>,
    pub fixed_names: Vec<String>,
    /// Per-column fixed-effect prior SDs; defaults to 10.
    pub fixed_prior_sd: Option<Vec<f64>>,
    pub sigma_prior: ExponentialPrior,
}

impl ModelSpec {
    pub fn new(
        xs: Vec<f64>,
        response: Vec<f64>,
        family: Family,
        smooth: SmoothSpec,
        sigma_prior: ExponentialPrior,
    ) -> Self {
        Self {
            xs,
            response,
            family,
            smooth,
            poly_prior_sd: None,
            fixed_design: None,
            fixed_names: Vec::new(),
            fixed_prior_sd: None,
            sigma_prior,
        }
    }
}

/// The smooth component of the latent field.
#[derive(Debug, Clone)]
pub enum SmoothTerm {
    OSpline {
        basis: OSplineBasis,
        /// Diagonal weight precision at σ = 1.
        precision: DVector<f64>,
    },
    Exact(ExactField),
}

/// `W_p` at the distinct locations right of the origin.
#[derive(Debug, Clone)]
pub struct ExactField {
    pub order: usize,
    pub origin: f64,
    pub region_end: f64,
    pub locations: Vec<f64>,
    /// Unit-σ covariance factor and inverse.
    pub chol: Cholesky<f64, Dyn>,
    pub k_inv: DMatrix<f64>,
    pub log_det_k: f64,
}

impl ExactField {
    fn new(order: usize, region: (f64, f64), xs: &[f64]) -> Result<Self> {
        let distinct: BTreeSet<u64> = xs.iter().filter(|&&x| x > region.0).map(|x| x.to_bits()).collect();
        let mut locations: Vec<f64> = distinct.into_iter().map(f64::from_bits).collect();
        locations.sort_by(f64::total_cmp);
        let n = locations.len();
        let k = DMatrix::from_fn(n, n, |i, j| unit_cov(order, 0, 0, locations[i] - region.0, locations[j] - region.0));
        let chol = Cholesky::new(k.clone()).ok_or_else(|| {
            let sv = k.singular_values();
            Error::Numeric(format!(
                "Cholesky factorization of the {n}×{n} exact IWP covariance failed (condition number {:.3e})",
                sv.max() / sv.min()
            ))
        })?;
        let log_det_k = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let k_inv = chol.inverse();
        Ok(Self { order, origin: region.0, region_end: region.1, locations, chol, k_inv, log_det_k })
    }

    fn column_of(&self, x: f64) -> Option<usize> {
        if x <= self.origin {
            return None;
        }
        self.locations.binary_search_by(|v| v.total_cmp(&x)).ok()
    }
}

impl SmoothTerm {
    pub fn order(&self) -> usize {
        match self {
            SmoothTerm::OSpline { basis, .. } => basis.order(),
            SmoothTerm::Exact(f) => f.order,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SmoothTerm::OSpline { basis, .. } => basis.len(),
            SmoothTerm::Exact(f) => f.locations.len(),
        }
    }

    pub fn region(&self) -> (f64, f64) {
        match self {
            SmoothTerm::OSpline { basis, .. } => (basis.knot_set().region_start(), basis.knot_set().region_end()),
            SmoothTerm::Exact(f) => (f.origin, f.region_end),
        }
    }
}

/// Extended latent Gaussian model with a single smooth term.
///
/// The latent vector is `(w, γ, β, ε)`: smooth weights, polynomial trend
/// coefficients in powers of `x − region_start`, fixed effects and (for the
/// overdispersed family only) observation-level effects. The linear
/// predictor is `η = A (w, γ, β) + ε` with `A = [Φ | P | V]`.
///
/// Hyperparameters are carried on the log scale: `θ[0] = log σ` and, when
/// the family hyperparameter is estimated, `θ[1] = log κ` or `log φ`.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub xs: Vec<f64>,
    pub response: Vec<f64>,
    pub family: Family,
    pub smooth: SmoothTerm,
    pub poly_prior_sd: Vec<f64>,
    pub fixed_prior_sd: Vec<f64>,
    pub fixed_names: Vec<String>,
    pub sigma_prior: ExponentialPrior,
    /// `[Φ | P | V]`, n × m.
    pub design: DMatrix<f64>,
    /// Nonzero column indices of each design row, ascending.
    pub(crate) row_support: Vec<Vec<usize>>,
    pub(crate) design_nnz: usize,
    /// `AᵀA`, kept for the Gaussian family whose weights are constant.
    pub(crate) gram: Option<DMatrix<f64>>,
    pub(crate) log_factorial_sum: f64,
}

impl LatentModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let n = spec.xs.len();
        if n == 0 {
            return invalid("at least one observation is required");
        }
        if spec.response.len() != n {
            return invalid(format!("{n} covariate values but {} responses", spec.response.len()));
        }
        if let Some(x) = spec.xs.iter().find(|x| !x.is_finite()) {
            return Err(Error::Data(format!("covariate value {x} is not finite")));
        }
        if let Some(y) = spec.response.iter().find(|y| !y.is_finite()) {
            return Err(Error::Data(format!("response value {y} is not finite")));
        }
        match spec.family {
            Family::Poisson | Family::PoissonOverdispersed { .. } => {
                if let Some((i, y)) = spec.response.iter().enumerate().find(|(_, &y)| y < 0.0 || y.fract() != 0.0) {
                    return Err(Error::Data(format!(
                        "Poisson response at row {i} must be a non-negative integer, got {y}"
                    )));
                }
            }
            Family::Gaussian { .. } => {}
        }
        if let Some(h) = spec.family.hyper() {
            match h {
                HyperSetting::Fixed(v) if !(v > 0.0 && v.is_finite()) => {
                    return invalid(format!("fixed family hyperparameter must be positive, got {v}"));
                }
                _ => {}
            }
        }

        let (smooth, region) = match spec.smooth {
            SmoothSpec::OSpline(basis) => {
                let region = (basis.knot_set().region_start(), basis.knot_set().region_end());
                let precision = basis.knot_set().weight_precision();
                (SmoothTerm::OSpline { basis, precision }, region)
            }
            SmoothSpec::Exact { order, region } => {
                crate::basis::check_order(order)?;
                if !(region.1 > region.0) {
                    return invalid(format!("invalid region [{}, {}]", region.0, region.1));
                }
                (SmoothTerm::Exact(ExactField::new(order, region, &spec.xs)?), region)
            }
        };
        if let Some(x) = spec.xs.iter().find(|&&x| x < region.0 || x > region.1) {
            return invalid(format!("covariate value {x} lies outside the region [{}, {}]", region.0, region.1));
        }
        let p = smooth.order();
        let poly_prior_sd = spec.poly_prior_sd.unwrap_or_else(|| vec![DEFAULT_POLY_PRIOR_VAR.sqrt(); p]);
        if poly_prior_sd.len() != p {
            return invalid(format!("expected {p} polynomial prior SDs, got {}", poly_prior_sd.len()));
        }
        if poly_prior_sd.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return invalid("polynomial prior SDs must be positive");
        }

        let smooth_block = match &smooth {
            SmoothTerm::OSpline { basis, .. } => basis.design_matrix(&spec.xs, 0)?.values,
            SmoothTerm::Exact(field) => {
                let mut m = DMatrix::zeros(n, field.locations.len());
                for (i, &x) in spec.xs.iter().enumerate() {
                    if let Some(c) = field.column_of(x) {
                        m[(i, c)] = 1.0;
                    }
                }
                m
            }
        };
        let shifted: Vec<f64> = spec.xs.iter().map(|x| x - region.0).collect();
        let poly = polynomial_design(&shifted, p, 0)?;

        let (fixed, fixed_prior_sd) = match spec.fixed_design {
            Some(v) => {
                if v.nrows() != n {
                    return invalid(format!("fixed-effect design has {} rows, expected {n}", v.nrows()));
                }
                let sds = spec.fixed_prior_sd.unwrap_or_else(|| vec![DEFAULT_FIXED_PRIOR_SD; v.ncols()]);
                if sds.len() != v.ncols() || sds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return invalid("fixed-effect prior SDs must be positive, one per column");
                }
                (v, sds)
            }
            None => (DMatrix::zeros(n, 0), Vec::new()),
        };
        if !spec.fixed_names.is_empty() && spec.fixed_names.len() != fixed.ncols() {
            return invalid(format!("{} fixed-effect names for {} columns", spec.fixed_names.len(), fixed.ncols()));
        }
        let fixed_names = if spec.fixed_names.is_empty() {
            (0..fixed.ncols()).map(|j| format!("beta{}", j + 1)).collect()
        } else {
            spec.fixed_names
        };

        let ks = smooth_block.ncols();
        let m = ks + p + fixed.ncols();
        let mut design = DMatrix::zeros(n, m);
        design.columns_mut(0, ks).copy_from(&smooth_block);
        design.columns_mut(ks, p).copy_from(&poly);
        design.columns_mut(ks + p, fixed.ncols()).copy_from(&fixed);

        let row_support: Vec<Vec<usize>> =
            (0..n).map(|i| (0..m).filter(|&j| design[(i, j)] != 0.0).collect()).collect();
        let design_nnz = row_support.iter().map(Vec::len).sum();
        let gram = match spec.family {
            Family::Gaussian { .. } if design_nnz * 4 > n * m => Some(design.tr_mul(&design)),
            _ => None,
        };
        let log_factorial_sum = match spec.family {
            Family::Gaussian { .. } => 0.0,
            _ => spec.response.iter().map(|&y| ln_factorial(y as u64)).sum(),
        };

        Ok(Self {
            xs: spec.xs,
            response: spec.response,
            family: spec.family,
            smooth,
            poly_prior_sd,
            fixed_prior_sd,
            fixed_names,
            sigma_prior: spec.sigma_prior,
            design,
            row_support,
            design_nnz,
            gram,
            log_factorial_sum,
        })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn order(&self) -> usize {
        self.smooth.order()
    }

    /// Columns of `A`: smooth, polynomial and fixed effects.
    pub fn core_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn has_observation_effects(&self) -> bool {
        matches!(self.family, Family::PoissonOverdispersed { .. })
    }

    /// Full latent dimension including observation-level effects.
    pub fn latent_dim(&self) -> usize {
        self.core_dim() + if self.has_observation_effects() { self.n() } else { 0 }
    }

    pub fn poly_offset(&self) -> usize {
        self.smooth.dim()
    }

    pub fn fixed_offset(&self) -> usize {
        self.smooth.dim() + self.order()
    }

    pub fn region(&self) -> (f64, f64) {
        self.smooth.region()
    }

    pub(crate) fn family_hyper(&self) -> Option<HyperSetting> {
        self.family.hyper()
    }

    /// Number of hyperparameters on the quadrature grid.
    pub fn theta_dim(&self) -> usize {
        1 + usize::from(matches!(self.family_hyper(), Some(HyperSetting::Estimated(_))))
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return invalid(format!("expected {} hyperparameters, got {}", self.theta_dim(), theta.len()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return invalid("hyperparameters must be finite");
        }
        Ok(())
    }

    pub fn sigma(&self, theta: &[f64]) -> f64 {
        theta[0].exp()
    }

    /// Noise SD (Gaussian) or overdispersion SD (overdispersed Poisson).
    pub fn family_value(&self, theta: &[f64]) -> Option<f64> {
        match self.family_hyper()? {
            HyperSetting::Fixed(v) => Some(v),
            HyperSetting::Estimated(_) => Some(theta[1].exp()),
        }
    }

    /// Log hyperprior density of the log-scale θ, Jacobian included.
    pub fn log_hyperprior(&self, theta: &[f64]) -> f64 {
        let sigma = self.sigma(theta);
        let mut lp = self.sigma_prior.log_density(sigma) + theta[0];
        if let Some(HyperSetting::Estimated(prior)) = self.family_hyper() {
            lp += prior.log_density(theta[1].exp()) + theta[1];
        }
        lp
    }

    /// A starting θ: prior medians on the log scale.
    pub fn default_theta(&self) -> Vec<f64> {
        let mut t = vec![self.sigma_prior.median().ln()];
        if let Some(HyperSetting::Estimated(prior)) = self.family_hyper() {
            t.push(prior.median().ln());
        }
        t
    }
}

/// `ln(n!)`, exact summation for small `n`, Stirling series beyond.
pub(crate) fn ln_factorial(n: u64) -> f64 {
    if n < 256 {
        (2..=n).map(|i| (i as f64).ln()).sum()
    } else {
        let x = n as f64;
        x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x.powi(3))
            + 1.0 / (1260.0 * x.powi(5))
    }
}

/// Sum-to-zero coding of a categorical column. Levels are sorted; the last
/// level is the reference whose effect is minus the sum of the others.
/// Returns the `n × (L − 1)` design and the sorted levels.
pub fn sum_coded_design(labels: &[String]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let levels: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if levels.len() < 2 {
        return invalid(format!("categorical column needs at least two levels, found {}", levels.len()));
    }
    let last = levels.len() - 1;
    let design = DMatrix::from_fn(labels.len(), last, |i, j| {
        let level = levels.binary_search(&labels[i]).expect("label is a level");
        if level == j {
            1.0
        } else if level == last {
            -1.0
        } else {
            0.0
        }
    });
    Ok((design, levels))
}
