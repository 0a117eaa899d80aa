//! Seeded replications of the correlation, benchmark and mixture studies.
//!
//! Each study writes plot-ready CSV files and a `manifest.json` recording
//! the seed, a SHA-256 of the canonical configuration and the crate
//! version. Wall-clock timings go to separate files so every other output
//! is byte-identical across reruns with the same seed.

mod bench;
mod config;
mod corr;
mod gmm;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

pub use bench::{
    bench_model, compare_with_exact, run_benchmark_study, sine_data, sine_truth, write_curve_sets_csv, BenchCell,
    BenchStudy, CurveSet, Method,
};
pub use config::{bundled_config, ExperimentConfig, ExperimentId, Profile};
pub use corr::{run_correlation_study, CorrRow, CorrStudy};
pub use gmm::{
    derivative_moments, method_label, replicate_data, run_gmm_study, CurveRow, MixtureTruth, RmseReport, RmseRow,
    MIXTURE_WEIGHTS,
};

use crate::error::Result;

/// Record of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub config_sha256: String,
    pub config: String,
    pub version: String,
    /// Deterministic outputs.
    pub outputs: Vec<String>,
    /// Outputs containing wall-clock timings.
    pub timing_outputs: Vec<String>,
}

/// Grid points per axis for the benchmark's curve comparison.
const COMPARISON_GRID: usize = 201;
/// Observation count used for the curve comparison when it is configured.
const COMPARISON_N: usize = 100;

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Run the configured experiment, writing its outputs and manifest into
/// `out_dir` (created if missing).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    let mut timing_outputs = Vec::new();
    match cfg.experiment {
        ExperimentId::Corr => {
            let study = run_correlation_study(cfg)?;
            study.write_csv(create(out_dir, "corr_curves.csv")?)?;
            study.write_summary_csv(create(out_dir, "corr_summary.csv")?)?;
            outputs.extend(["corr_curves.csv".to_string(), "corr_summary.csv".to_string()]);
        }
        ExperimentId::Bench => {
            let study = run_benchmark_study(cfg)?;
            study.write_conditioning_csv(create(out_dir, "bench_conditioning.csv")?)?;
            study.write_timing_csv(create(out_dir, "bench_timing.csv")?)?;
            outputs.push("bench_conditioning.csv".to_string());
            timing_outputs.push("bench_timing.csv".to_string());
            if cfg.n.contains(&COMPARISON_N) {
                let sets = compare_with_exact(cfg, COMPARISON_N, COMPARISON_GRID)?;
                write_curve_sets_csv(create(out_dir, "bench_curves.csv")?, &sets)?;
                outputs.push("bench_curves.csv".to_string());
            }
        }
        ExperimentId::Gmm => {
            let report = run_gmm_study(cfg)?;
            report.write_rmse_csv(create(out_dir, "gmm_rmse.csv")?)?;
            report.write_summary_csv(create(out_dir, "gmm_summary.csv")?)?;
            report.write_curves_csv(create(out_dir, "gmm_curves.csv")?)?;
            outputs.extend(["gmm_rmse.csv", "gmm_summary.csv", "gmm_curves.csv"].map(String::from));
        }
    }
    let manifest = Manifest {
        experiment: cfg.experiment,
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        config: cfg.canonical(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        timing_outputs,
    };
    serde_json::to_writer_pretty(create(out_dir, "manifest.json")?, &manifest)?;
    Ok(manifest)
}
