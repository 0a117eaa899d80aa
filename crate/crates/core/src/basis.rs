//! Knots, piecewise-constant test functions and overlapping-spline bases.
//!
//! Basis function `i` (0-based) is anchored on the cell `(s_i, s_{i+1}]`,
//! where `s_0` is the region start and `s_1 < … < s_k` are the stored knots.
//! It is the `p`-fold integral from the region start of the indicator of its
//! cell, so its `q`-th derivative is the order `p − q` basis function on the
//! same cell. All design matrices are dense.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest supported order.
pub const MAX_ORDER: usize = 20;

const FACTORIALS: [f64; MAX_ORDER + 1] = {
    let mut table = [1.0; MAX_ORDER + 1];
    let mut i = 1;
    while i <= MAX_ORDER {
        table[i] = table[i - 1] * i as f64;
        i += 1;
    }
    table
};

/// `n!` for `n ≤ MAX_ORDER`.
pub fn factorial(n: usize) -> f64 {
    FACTORIALS[n]
}

pub(crate) fn check_order(p: usize) -> Result<()> {
    if p == 0 || p > MAX_ORDER {
        return invalid(format!("order must be in 1..={MAX_ORDER}, got {p}"));
    }
    Ok(())
}

/// Ordered knot locations over `[region_start, region_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    region_start: f64,
    region_end: f64,
    knots: Vec<f64>,
    spacings: Vec<f64>,
}

impl KnotSet {
    /// `k` equally spaced knots; the last knot sits on `region_end`.
    pub fn equal(region_start: f64, region_end: f64, k: usize) -> Result<Self> {
        if !(region_start.is_finite() && region_end.is_finite()) {
            return invalid(format!("region bounds must be finite, got [{region_start}, {region_end}]"));
        }
        if region_end <= region_start {
            return invalid(format!("region end {region_end} must exceed start {region_start}"));
        }
        if k == 0 {
            return invalid("number of knots must be positive");
        }
        let width = region_end - region_start;
        let knots: Vec<f64> =
            (1..=k).map(|i| if i == k { region_end } else { region_start + i as f64 * width / k as f64 }).collect();
        Self::new(region_start, region_end, knots)
    }

    /// Arbitrary strictly increasing knots in `(region_start, region_end]`.
    pub fn new(region_start: f64, region_end: f64, knots: Vec<f64>) -> Result<Self> {
        if !(region_start.is_finite() && region_end.is_finite()) || region_end <= region_start {
            return invalid(format!("invalid region [{region_start}, {region_end}]"));
        }
        if knots.is_empty() {
            return invalid("at least one knot is required");
        }
        if knots.iter().any(|s| !s.is_finite()) {
            return invalid("knots must be finite");
        }
        let mut spacings = Vec::with_capacity(knots.len());
        let mut prev = region_start;
        for &s in &knots {
            if s <= prev {
                return invalid(format!(
                    "knots must be strictly increasing and above the region start; {s} follows {prev}"
                ));
            }
            spacings.push(s - prev);
            prev = s;
        }
        if prev > region_end {
            return invalid(format!("last knot {prev} lies beyond the region end {region_end}"));
        }
        Ok(Self { region_start, region_end, knots, spacings })
    }

    pub fn region_start(&self) -> f64 {
        self.region_start
    }

    pub fn region_end(&self) -> f64 {
        self.region_end
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacings(&self) -> &[f64] {
        &self.spacings
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Left end of cell `i`: `s_i` with `s_0 = region_start`.
    pub fn cell_start(&self, i: usize) -> f64 {
        if i == 0 {
            self.region_start
        } else {
            self.knots[i - 1]
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.knots.len() {
            return invalid(format!("basis index {i} out of range for {} knots", self.knots.len()));
        }
        Ok(())
    }

    /// Piecewise-constant test function of cell `i`: one on the right-closed
    /// cell `(s_i, s_{i+1}]`, zero elsewhere.
    pub fn test_function(&self, i: usize, x: f64) -> Result<f64> {
        self.check_index(i)?;
        Ok(indicator(self.cell_start(i), self.knots[i], x))
    }

    /// Diagonal of the weight precision: entry `i` is the cell width `d_i`.
    pub fn weight_precision(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.spacings)
    }
}

fn indicator(left: f64, right: f64, x: f64) -> f64 {
    if x > left && x <= right {
        1.0
    } else {
        0.0
    }
}

/// Value at `x` of the order-`r` O-spline on cell `(left, left + d]`.
/// `r = 0` is the test function itself.
fn ospline_value(r: usize, left: f64, d: f64, x: f64) -> f64 {
    if x <= left {
        return 0.0;
    }
    let right = left + d;
    if r == 0 {
        return indicator(left, right, x);
    }
    if x <= right {
        return (x - left).powi(r as i32) / FACTORIALS[r];
    }
    let u = x - right;
    // Horner in u over Σ_{j=1}^{r} d^j u^{r−j} / (j!(r−j)!).
    let mut acc = 0.0;
    let mut dj = 1.0;
    let mut terms = [0.0; MAX_ORDER + 1];
    for (j, term) in terms.iter_mut().enumerate().take(r + 1).skip(1) {
        dj *= d;
        *term = dj / (FACTORIALS[j] * FACTORIALS[r - j]);
    }
    for term in terms.iter().take(r + 1).skip(1) {
        acc = acc * u + term;
    }
    acc
}

/// Overlapping-spline basis of order `p` on a knot set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OSplineBasis {
    order: usize,
    knot_set: KnotSet,
}

impl OSplineBasis {
    pub fn new(order: usize, knot_set: KnotSet) -> Result<Self> {
        check_order(order)?;
        Ok(Self { order, knot_set })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knot_set(&self) -> &KnotSet {
        &self.knot_set
    }

    pub fn len(&self) -> usize {
        self.knot_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knot_set.is_empty()
    }

    /// Basis of order `p − q` on the same knots; its functions are the
    /// `q`-th derivatives of this basis.
    pub fn lowered(&self, q: usize) -> Result<Self> {
        if q >= self.order {
            return invalid(format!("cannot lower order {} by {q}", self.order));
        }
        Self::new(self.order - q, self.knot_set.clone())
    }

    /// `q`-th derivative of basis function `i` at `x`. For `q = p` this is
    /// the test function, with the right-closed convention at knots.
    pub fn eval(&self, i: usize, x: f64, q: usize) -> Result<f64> {
        self.knot_set.check_index(i)?;
        if q > self.order {
            return invalid(format!("derivative order {q} exceeds basis order {}", self.order));
        }
        if !x.is_finite() || x < self.knot_set.region_start {
            return invalid(format!(
                "evaluation point {x} lies left of the region start {}",
                self.knot_set.region_start
            ));
        }
        Ok(self.eval_unchecked(i, x, q))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, i: usize, x: f64, q: usize) -> f64 {
        ospline_value(self.order - q, self.knot_set.cell_start(i), self.knot_set.spacings[i], x)
    }

    /// Dense `n × k` matrix of `q`-th derivatives at `xs`.
    pub fn design_matrix(&self, xs: &[f64], q: usize) -> Result<DesignBlock> {
        if q >= self.order {
            return invalid(format!("derivative order {q} must be below the basis order {}", self.order));
        }
        let (a, b) = (self.knot_set.region_start, self.knot_set.region_end);
        if let Some(&x) = xs.iter().find(|&&x| !(x >= a && x <= b)) {
            return invalid(format!("location {x} lies outside the region [{a}, {b}]"));
        }
        let k = self.len();
        let values = DMatrix::from_fn(xs.len(), k, |r, c| self.eval_unchecked(c, xs[r], q));
        Ok(DesignBlock { values, derivative_order: q, source_order: self.order })
    }
}

/// Design matrix of basis derivatives at a set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    pub values: DMatrix<f64>,
    pub derivative_order: usize,
    pub source_order: usize,
}

/// `n × p` matrix whose entry `(i, l)` is the `q`-th derivative of `x^l` at
/// `xs[i]`, for `l = 0..p`.
pub fn polynomial_design(xs: &[f64], p: usize, q: usize) -> Result<DMatrix<f64>> {
    check_order(p)?;
    if q >= p {
        return invalid(format!("derivative order {q} must be below the order {p}"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return invalid("locations must be finite");
    }
    Ok(DMatrix::from_fn(xs.len(), p, |r, l| {
        if l < q {
            0.0
        } else {
            FACTORIALS[l] / FACTORIALS[l - q] * xs[r].powi((l - q) as i32)
        }
    }))
}
