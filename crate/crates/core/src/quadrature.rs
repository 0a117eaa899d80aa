//! One-dimensional quadrature rules.
//!
//! `integrate` is a globally adaptive Gauss–Kronrod (7/15) integrator in the
//! spirit of QUADPACK's QAG. `GaussHermite` provides nodes and weights for
//! integrals against the standard normal density, built with Golub–Welsch.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for the 7-point rule embedded at the odd Kronrod nodes.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

const MAX_SEGMENTS: usize = 2000;

/// Integration result with an error estimate.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub abs_error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    (value, error)
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]` to absolute
/// tolerance `abs_tol`.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<Estimate> {
    integrate_with_breaks(f, a, b, &[], abs_tol)
}

/// Like [`integrate`], but the interval is split at `breaks` first so that
/// kinks or jumps there do not slow convergence. Breaks outside `(a, b)` are
/// ignored.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
) -> Result<Estimate> {
    if !(a.is_finite() && b.is_finite()) {
        return invalid(format!("integration bounds must be finite, got [{a}, {b}]"));
    }
    if a == b {
        return Ok(Estimate { value: 0.0, abs_error: 0.0, evaluations: 0 });
    }
    if b < a {
        let est = integrate_with_breaks(f, b, a, breaks, abs_tol)?;
        return Ok(Estimate { value: -est.value, ..est });
    }

    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut points = Vec::with_capacity(cuts.len() + 2);
    points.push(a);
    points.extend(cuts);
    points.push(b);

    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    let mut evaluations = 0;
    for w in points.windows(2) {
        let (value, error) = gk15(&mut f, w[0], w[1]);
        evaluations += 15;
        total += value;
        total_err += error;
        heap.push(Segment { a: w[0], b: w[1], value, error });
    }

    while total_err > abs_tol {
        if heap.len() >= MAX_SEGMENTS {
            return Err(Error::Numeric(format!(
                "adaptive quadrature on [{a}, {b}] did not reach tolerance {abs_tol:.1e}: \
                 estimate {total:.6e}, error {total_err:.3e} after {evaluations} evaluations"
            )));
        }
        let worst = heap.pop().expect("heap is non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval can no longer be bisected in floating point.
            heap.push(Segment { error: 0.0, ..worst });
            total_err -= worst.error;
            continue;
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        evaluations += 30;
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Segment { a: mid, b: worst.b, value: v2, error: e2 });
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite integrand encountered on [{a}, {b}]")));
        }
    }

    // Re-sum from segments to shed accumulated update rounding.
    let value = heap.iter().map(|s| s.value).sum();
    let abs_error = heap.iter().map(|s| s.error).sum();
    Ok(Estimate { value, abs_error, evaluations })
}

/// Gauss–Hermite rule for expectations under the standard normal density:
/// `E[f(Z)] ≈ Σ weights[i] f(nodes[i])`, exact for polynomials up to degree
/// `2n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("Gauss-Hermite rule needs at least one node");
        }
        // Jacobi matrix of the probabilists' Hermite polynomials.
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64).sqrt();
            jacobi[(i, i - 1)] = b;
            jacobi[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> =
            (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        // Symmetrize to remove eigen-solver noise.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let node = 0.5 * (pairs[j].0 - pairs[i].0);
            let weight = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-node, weight);
            pairs[j] = (node, weight);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1 / total).collect() })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}
