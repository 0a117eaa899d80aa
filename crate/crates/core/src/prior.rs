//! Predictive-SD reparameterization of the smoothing SD and exponential
//! priors elicited on it.
//!
//! The `h`-unit predictive SD is the SD of `g(x + h)` given `g` and its first
//! `p − 1` derivatives at `x`:
//!
//! ```text
//! σ(h) = σ · sqrt(h^(2p−1)) / (sqrt(2p − 1) · (p − 1)!)
//! ```
//!
//! which does not depend on `x`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::basis::{check_order, factorial};
use crate::error::{invalid, Error, Result};
use crate::gp_exact::{unit_cov, IwpKernel};

/// Prediction step `h` for an order-`p` process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdSpec {
    h: f64,
    order: usize,
}

impl PsdSpec {
    pub fn new(h: f64, order: usize) -> Result<Self> {
        check_order(order)?;
        if !(h > 0.0 && h.is_finite()) {
            return invalid(format!("prediction step h must be positive, got {h}"));
        }
        let spec = Self { h, order };
        let c = spec.conversion_factor();
        if !(c.is_finite() && c > 0.0) {
            return invalid(format!("conversion factor for p={order}, h={h} is not finite"));
        }
        Ok(spec)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `c(p, h) = (p−1)! sqrt((2p−1) / h^(2p−1))`, so that `σ = c · σ(h)`.
    pub fn conversion_factor(&self) -> f64 {
        let p = self.order as i32;
        factorial(self.order - 1) * ((2 * p - 1) as f64 / self.h.powi(2 * p - 1)).sqrt()
    }

    pub fn sigma_to_psd(&self, sigma: f64) -> f64 {
        let p = self.order as i32;
        sigma * self.h.powi(2 * p - 1).sqrt() / (((2 * p - 1) as f64).sqrt() * factorial(self.order - 1))
    }

    pub fn psd_to_sigma(&self, psd: f64) -> f64 {
        psd * self.conversion_factor()
    }
}

/// Which quantity an exponential prior is placed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorTarget {
    Sigma,
    Psd,
}

/// Exponential prior `rate · exp(−rate · x)` on a non-negative scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialPrior {
    pub rate: f64,
    pub target: PriorTarget,
}

impl ExponentialPrior {
    pub fn new(rate: f64, target: PriorTarget) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return invalid(format!("exponential rate must be positive, got {rate}"));
        }
        Ok(Self { rate, target })
    }

    /// Rate such that the median is `median`.
    pub fn with_median(median: f64, target: PriorTarget) -> Result<Self> {
        if !(median > 0.0 && median.is_finite()) {
            return invalid(format!("median must be positive, got {median}"));
        }
        Self::new(std::f64::consts::LN_2 / median, target)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x < 0.0 {
            f64::NEG_INFINITY
        } else {
            self.rate.ln() - self.rate * x
        }
    }

    /// `P(X > x)`.
    pub fn exceedance(&self, x: f64) -> f64 {
        if x <= 0.0 {
            1.0
        } else {
            (-self.rate * x).exp()
        }
    }

    pub fn median(&self) -> f64 {
        std::f64::consts::LN_2 / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Exp::new(self.rate).expect("validated rate").sample(rng)
    }
}

/// `σ(h)` for a given `σ`.
pub fn sigma_to_psd(spec: &PsdSpec, sigma: f64) -> f64 {
    spec.sigma_to_psd(sigma)
}

/// Inverse of [`sigma_to_psd`].
pub fn psd_to_sigma(spec: &PsdSpec, psd: f64) -> f64 {
    spec.psd_to_sigma(psd)
}

/// Exponential prior on `σ` such that `P(σ(h) > u) = alpha`.
pub fn prior_from_psd(spec: &PsdSpec, u: f64, alpha: f64) -> Result<ExponentialPrior> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if !(u > 0.0 && u.is_finite()) {
        return invalid(format!("u must be positive, got {u}"));
    }
    let psd_rate = -alpha.ln() / u;
    ExponentialPrior::new(psd_rate / spec.conversion_factor(), PriorTarget::Sigma)
}

fn rational(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::InvalidArgument(format!("{x} is not finite")))
}

/// SD of `g(x + h)` given `g(x), g'(x), …, g^(p−1)(x)` under the exact
/// kernel, by Gaussian conditioning of the joint covariance.
///
/// The conditional variance is smaller than the joint entries by up to
/// `((x + h)/h)^(2p−1)`, so the Schur complement is formed in exact rational
/// arithmetic on the (exactly representable) floating-point inputs.
/// Conditioning variables with zero variance (at the origin) carry no
/// information and are skipped.
pub fn psd_conditional_check(kernel: &IwpKernel, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return invalid(format!("h must be positive, got {h}"));
    }
    if !(x >= kernel.origin() && x.is_finite()) {
        return invalid(format!("x = {x} precedes the origin {}", kernel.origin()));
    }
    let p = kernel.order();
    let u = rational(x)? - rational(kernel.origin())?;
    let ahead = u.clone() + rational(h)?;

    // Variables: 0 ↦ g(x + h), 1 + j ↦ g^(j)(x).
    let n = p + 1;
    let point = |i: usize| {
        if i == 0 {
            (ahead.clone(), 0)
        } else {
            (u.clone(), i - 1)
        }
    };
    let mut m: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (s, q1) = point(i);
                    let (t, q2) = point(j);
                    unit_cov(p, q1, q2, s, t)
                })
                .collect()
        })
        .collect();

    for piv in 1..n {
        if m[piv][piv].is_zero() {
            if m[piv].iter().any(|v| !v.is_zero()) {
                return Err(Error::Numeric(format!("singular conditioning matrix at x = {x} (variable {piv})")));
            }
            continue;
        }
        let pivot_row = m[piv].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r == piv || row[piv].is_zero() {
                continue;
            }
            let factor = row[piv].clone() / pivot_row[piv].clone();
            for (c, v) in row.iter_mut().enumerate() {
                *v -= factor.clone() * pivot_row[c].clone();
            }
        }
    }
    let var = m[0][0].clone();
    if var < BigRational::from_integer(BigInt::from(0)) {
        return Err(Error::Numeric("negative conditional variance".into()));
    }
    let var = var.to_f64().ok_or_else(|| Error::Numeric("conditional variance overflow".into()))?;
    Ok(kernel.sigma() * var.sqrt())
}
