//! Shared fixtures for the criterion benchmarks.

use ospline_core::simbench::{bench_model, sine_data, ExperimentConfig, ExperimentId, Method, Profile};
use ospline_core::LatentModel;

/// Benchmark-study configuration with its default settings.
pub fn bench_config() -> ExperimentConfig {
    ExperimentConfig::defaults(ExperimentId::Bench, Profile::Ci)
}

/// Gaussian sine-regression model with `n` points, as in the runtime study.
pub fn sine_model(method: Method, n: usize) -> LatentModel {
    let cfg = bench_config();
    let (xs, ys) = sine_data(n, cfg.region, cfg.noise_sd, cfg.seed);
    bench_model(method, &xs, &ys, &cfg, cfg.orders[0]).expect("valid benchmark model")
}
