use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Corr,
    Bench,
    Gmm,
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corr" => Ok(Self::Corr),
            "bench" => Ok(Self::Bench),
            "gmm" => Ok(Self::Gmm),
            other => invalid(format!("unknown experiment '{other}' (expected corr, bench or gmm)")),
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corr => "corr",
            Self::Bench => "bench",
            Self::Gmm => "gmm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Ci,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(Self::Ci),
            "full" => Ok(Self::Full),
            other => invalid(format!("unknown profile '{other}' (expected ci or full)")),
        }
    }
}

/// Settings shared by the three experiments. Unused keys are ignored by
/// experiments that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub orders: Vec<usize>,
    pub knots: Vec<usize>,
    pub region: (f64, f64),
    pub n: Vec<usize>,
    pub seed: u64,
    pub replications: usize,
    pub num_quad: usize,
    pub samples: usize,
    pub grid_points: usize,
    pub reference_x: f64,
    pub noise_sd: f64,
    pub timing_runs: usize,
    pub psd_h: f64,
    pub psd_u: f64,
    pub psd_alpha: f64,
}

const KEYS: &[&str] = &[
    "experiment",
    "orders",
    "knots",
    "region",
    "n",
    "seed",
    "replications",
    "num_quad",
    "samples",
    "grid_points",
    "reference_x",
    "noise_sd",
    "timing_runs",
    "psd_h",
    "psd_u",
    "psd_alpha",
];

const CORR_CI: &str = include_str!("../../configs/corr-ci.conf");
const CORR_FULL: &str = include_str!("../../configs/corr-full.conf");
const BENCH_CI: &str = include_str!("../../configs/bench-ci.conf");
const BENCH_FULL: &str = include_str!("../../configs/bench-full.conf");
const GMM_CI: &str = include_str!("../../configs/gmm-ci.conf");
const GMM_FULL: &str = include_str!("../../configs/gmm-full.conf");

/// Text of the bundled default configuration.
pub fn bundled_config(experiment: ExperimentId, profile: Profile) -> &'static str {
    match (experiment, profile) {
        (ExperimentId::Corr, Profile::Ci) => CORR_CI,
        (ExperimentId::Corr, Profile::Full) => CORR_FULL,
        (ExperimentId::Bench, Profile::Ci) => BENCH_CI,
        (ExperimentId::Bench, Profile::Full) => BENCH_FULL,
        (ExperimentId::Gmm, Profile::Ci) => GMM_CI,
        (ExperimentId::Gmm, Profile::Full) => GMM_FULL,
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("config key '{key}': cannot parse '{}'", v.trim())))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("config key '{key}': cannot parse '{value}'")))
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentId, profile: Profile) -> Self {
        Self::parse(bundled_config(experiment, profile)).expect("bundled config is valid")
    }

    /// Parse `key = value` lines; `#` starts a comment. The `experiment` key
    /// selects the base defaults (ci profile) that other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, None)
    }

    /// Parse with a given base: keys in `text` override `base`.
    pub fn parse_with_base(text: &str, base: Option<&Self>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected 'key = value'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return invalid(format!("unknown config key '{key}' at line {}", lineno + 1));
            }
            if pairs.iter().any(|(k, _): &(&str, &str)| *k == key) {
                return invalid(format!("config key '{key}' given twice"));
            }
            pairs.push((key, value));
        }
        let experiment = match pairs.iter().find(|(k, _)| *k == "experiment") {
            Some((_, v)) => Some(v.parse::<ExperimentId>()?),
            None => None,
        };
        let mut cfg = match (base, experiment) {
            (Some(b), Some(e)) if b.experiment != e => {
                return invalid(format!("config is for experiment '{e}' but '{}' was requested", b.experiment))
            }
            (Some(b), _) => b.clone(),
            (None, Some(e)) => Self::builtin(e),
            (None, None) => return invalid("config key 'experiment' is required"),
        };
        for (key, value) in pairs {
            match key {
                "experiment" => {}
                "orders" => cfg.orders = parse_list(key, value)?,
                "knots" => cfg.knots = parse_list(key, value)?,
                "n" => cfg.n = parse_list(key, value)?,
                "region" => {
                    let r: Vec<f64> = parse_list(key, value)?;
                    if r.len() != 2 {
                        return invalid(format!("config key 'region' needs two values, got {}", r.len()));
                    }
                    cfg.region = (r[0], r[1]);
                }
                "seed" => cfg.seed = parse_one(key, value)?,
                "replications" => cfg.replications = parse_one(key, value)?,
                "num_quad" => cfg.num_quad = parse_one(key, value)?,
                "samples" => cfg.samples = parse_one(key, value)?,
                "grid_points" => cfg.grid_points = parse_one(key, value)?,
                "reference_x" => cfg.reference_x = parse_one(key, value)?,
                "noise_sd" => cfg.noise_sd = parse_one(key, value)?,
                "timing_runs" => cfg.timing_runs = parse_one(key, value)?,
                "psd_h" => cfg.psd_h = parse_one(key, value)?,
                "psd_u" => cfg.psd_u = parse_one(key, value)?,
                "psd_alpha" => cfg.psd_alpha = parse_one(key, value)?,
                _ => unreachable!("keys are validated"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, base: Option<&Self>) -> Result<Self> {
        Self::parse_with_base(&std::fs::read_to_string(path)?, base)
    }

    /// Hard-coded fallbacks, used only as the base when parsing the bundled
    /// files themselves.
    fn builtin(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            orders: vec![3],
            knots: vec![30],
            region: (0.0, 1.0),
            n: vec![100],
            seed: 1,
            replications: 1,
            num_quad: 10,
            samples: 3000,
            grid_points: 500,
            reference_x: 5.0,
            noise_sd: 1.0,
            timing_runs: 10,
            psd_h: 1.0,
            psd_u: 1.0,
            psd_alpha: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("orders", self.orders.iter().all(|&v| v > 0) && !self.orders.is_empty()),
            ("knots", self.knots.iter().all(|&v| v > 0) && !self.knots.is_empty()),
            ("n", self.n.iter().all(|&v| v > 0) && !self.n.is_empty()),
            ("replications", self.replications > 0),
            ("num_quad", self.num_quad > 0),
            ("samples", self.samples > 0),
            ("grid_points", self.grid_points > 1),
            ("timing_runs", self.timing_runs > 0),
            ("noise_sd", self.noise_sd > 0.0),
            ("psd_h", self.psd_h > 0.0),
            ("psd_u", self.psd_u > 0.0),
            ("psd_alpha", self.psd_alpha > 0.0 && self.psd_alpha < 1.0),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, ok)| !ok) {
            return invalid(format!("config key '{key}' must be positive (alpha in (0, 1))"));
        }
        if !(self.region.1 > self.region.0) {
            return invalid(format!("config key 'region': empty interval [{}, {}]", self.region.0, self.region.1));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; the config hash is taken over it.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("experiment", self.experiment.to_string());
        put("orders", list(&self.orders));
        put("knots", list(&self.knots));
        put("region", format!("{},{}", self.region.0, self.region.1));
        put("n", list(&self.n));
        put("seed", self.seed.to_string());
        put("replications", self.replications.to_string());
        put("num_quad", self.num_quad.to_string());
        put("samples", self.samples.to_string());
        put("grid_points", self.grid_points.to_string());
        put("reference_x", self.reference_x.to_string());
        put("noise_sd", self.noise_sd.to_string());
        put("timing_runs", self.timing_runs.to_string());
        put("psd_h", self.psd_h.to_string());
        put("psd_u", self.psd_u.to_string());
        put("psd_alpha", self.psd_alpha.to_string());
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
