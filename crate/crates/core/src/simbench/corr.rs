use std::io::Write;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::basis::{KnotSet, OSplineBasis};
use crate::error::{invalid, Result};
use crate::gp_exact::{ospline_cov, regular_grid, IwpKernel};

/// One point of a correlation curve `Cor[g(r), g^{(q)}(x)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrRow {
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub x: f64,
    pub exact_corr: f64,
    pub approx_corr: f64,
}

#[derive(Debug, Clone)]
pub struct CorrStudy {
    pub reference_x: f64,
    pub rows: Vec<CorrRow>,
}

impl CorrStudy {
    /// Largest absolute error over the x-grid for one curve.
    pub fn max_error(&self, p: usize, k: usize, q: usize) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.p == p && r.k == k && r.q == q)
            .map(|r| (r.exact_corr - r.approx_corr).abs())
            .reduce(f64::max)
    }

    /// `(p, k, q, max error)` for every curve, in study order.
    pub fn summary(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut out: Vec<(usize, usize, usize, f64)> = Vec::new();
        for r in &self.rows {
            let e = (r.exact_corr - r.approx_corr).abs();
            match out.last_mut() {
                Some(last) if (last.0, last.1, last.2) == (r.p, r.k, r.q) => last.3 = last.3.max(e),
                _ => out.push((r.p, r.k, r.q, e)),
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["p", "k", "q", "x", "exact_corr", "approx_corr"])?;
        for r in &self.rows {
            w.write_record(&[
                r.p.to_string(),
                r.k.to_string(),
                r.q.to_string(),
                r.x.to_string(),
                r.exact_corr.to_string(),
                r.approx_corr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["p", "k", "q", "max_abs_error"])?;
        for (p, k, q, e) in self.summary() {
            w.write_record(&[p.to_string(), k.to_string(), q.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn correlation(cov: f64, v1: f64, v2: f64) -> f64 {
    // Both processes vanish at the origin; report zero there.
    if v1 <= 0.0 || v2 <= 0.0 {
        0.0
    } else {
        cov / (v1 * v2).sqrt()
    }
}

/// Correlations of `g(r)` with `g^{(q)}(x)` for every order, knot count and
/// `q < p`, with `σ = 1` and no polynomial part, on an equally spaced x-grid.
pub fn run_correlation_study(cfg: &ExperimentConfig) -> Result<CorrStudy> {
    let (a, b) = cfg.region;
    let r = cfg.reference_x;
    if !(r > a && r <= b) {
        return invalid(format!("reference point {r} must lie in ({a}, {b}]"));
    }
    let xs = regular_grid(a, b, cfg.grid_points - 1);
    let mut rows = Vec::new();
    for &p in &cfg.orders {
        let kernel = IwpKernel::with_origin(p, 1.0, a)?;
        for &k in &cfg.knots {
            let basis = OSplineBasis::new(p, KnotSet::equal(a, b, k)?)?;
            let ref_exact = kernel.exact_cov(r, r, 0, 0)?;
            let ref_approx = ospline_cov(&basis, 1.0, r, r, 0, 0)?;
            for q in 0..p {
                for &x in &xs {
                    let exact = correlation(kernel.exact_cov(r, x, 0, q)?, ref_exact, kernel.exact_cov(x, x, q, q)?);
                    let approx = correlation(
                        ospline_cov(&basis, 1.0, r, x, 0, q)?,
                        ref_approx,
                        ospline_cov(&basis, 1.0, x, x, q, q)?,
                    );
                    rows.push(CorrRow { p, k, q, x, exact_corr: exact, approx_corr: approx });
                }
            }
        }
    }
    Ok(CorrStudy { reference_x: r, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simbench::config::{ExperimentId, Profile};

    fn study() -> CorrStudy {
        run_correlation_study(&ExperimentConfig::defaults(ExperimentId::Corr, Profile::Ci)).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let mut cfg = ExperimentConfig::defaults(ExperimentId::Corr, Profile::Ci);
        cfg.grid_points = 4; // 0, 5, 10, 15
        let s = run_correlation_study(&cfg).unwrap();
        for row in s.rows.iter().filter(|r| r.x == 5.0 && r.q == 0) {
            assert!((row.exact_corr - 1.0).abs() < 1e-14);
            assert!((row.approx_corr - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn p1_exact_at_knots() {
        let mut cfg = ExperimentConfig::defaults(ExperimentId::Corr, Profile::Ci);
        cfg.orders = vec![1];
        cfg.knots = vec![15];
        cfg.grid_points = 16; // the knots themselves
        let s = run_correlation_study(&cfg).unwrap();
        for row in &s.rows {
            assert!((row.exact_corr - row.approx_corr).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn errors_shrink_with_k() {
        let s = study();
        for p in 1..=4 {
            for q in 0..p {
                let sup: Vec<f64> = [5, 10, 30, 100].iter().map(|&k| s.max_error(p, k, q).unwrap()).collect();
                assert!(sup.windows(2).all(|w| w[1] < w[0]), "p={p} q={q}: {sup:?}");
            }
        }
        // Error curves are non-increasing in k at nearly every grid point.
        let mut total = 0;
        let mut monotone = 0;
        for p in 1..=4 {
            for q in 0..p {
                let curves: Vec<Vec<f64>> = [5, 10, 30, 100]
                    .iter()
                    .map(|&k| {
                        s.rows
                            .iter()
                            .filter(|r| r.p == p && r.k == k && r.q == q)
                            .map(|r| (r.exact_corr - r.approx_corr).abs())
                            .collect()
                    })
                    .collect();
                for i in 0..curves[0].len() {
                    for w in curves.windows(2) {
                        total += 1;
                        if w[1][i] <= w[0][i] + 1e-12 {
                            monotone += 1;
                        }
                    }
                }
            }
        }
        assert!(monotone as f64 >= 0.95 * total as f64, "{monotone}/{total}");
    }
}
