//! Overlapping-spline (O-spline) approximation of integrated Wiener process
//! priors, with exact-process covariance oracles, predictive-SD prior
//! elicitation and approximate Bayesian inference for a smooth function and
//! its derivatives.

pub mod aghq;
pub mod basis;
pub mod error;
pub mod gp_exact;
pub mod inference;
pub mod prior;
pub mod quadrature;
pub mod simbench;

pub use nalgebra;

pub use basis::{factorial, polynomial_design, DesignBlock, KnotSet, OSplineBasis};
pub use error::{Error, Result};
pub use gp_exact::{exact_gp_fit, ospline_cov, CovGrid, CovarianceFn, GpData, GpPosterior, IwpKernel, OSplineKernel};
pub use inference::{aghq_fit, posterior_function, FitOptions, LatentModel, ModelSpec, PosteriorFit};
pub use prior::{prior_from_psd, ExponentialPrior, PriorTarget, PsdSpec};
