//! Latent Gaussian model fitting: conditional modes, Laplace approximation of
//! the hyperparameter posterior, adaptive quadrature and posterior sampling.

mod fit;
mod mode;
mod model;
mod posterior;

pub use fit::{
    aghq_fit, fit_fixed_theta, fixed_effect_summary, max_condition_number, summarize_draws, EffectSummary, FitOptions,
    FitSummary, GridPointSummary, PosteriorFit, QuadPoint,
};
pub use mode::{
    assemble_precision, condition_number, laplace_log_marginal, log_joint, log_joint_gradient, newton_mode,
    GaussianApprox, NewtonSettings,
};
pub use model::{
    sum_coded_design, ExactField, Family, HyperSetting, LatentModel, ModelSpec, SmoothSpec, SmoothTerm,
    DEFAULT_FIXED_PRIOR_SD, DEFAULT_POLY_PRIOR_VAR,
};
pub(crate) use posterior::mixture_moments;
pub use posterior::{posterior_function, posterior_moments, write_curves_csv, PosteriorFunction, Transform};
