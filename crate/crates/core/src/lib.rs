//! Small-area average treatment effects from observational data.
//!
//! The crate estimates area-specific average treatment effects by inverse
//! propensity weighting combined with small-area outcome predictors: a
//! random-slope linear mixed model (IPW-EBLUP) and robust M-quantile
//! regression (IPW-MQ), alongside the classical per-area IPW-Direct
//! contrast. It ships analytic MSE estimators for both model-based
//! predictors, two bootstrap add-ons capturing propensity-estimation
//! variability, benchmarking weights that aggregate area effects to the
//! national effect exactly, covariate-balance diagnostics, and a seeded
//! Monte Carlo harness for estimator comparison.

pub mod bootstrap;
pub mod design;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod frames;
pub mod glmm;
pub mod lmm;
pub mod mquantile;
pub mod mse;
pub mod numeric;
pub mod rng;
pub mod simgen;
pub mod svgplot;

pub use error::{Error, Result};
pub use frames::{draw_sample, load_population, validate_frame, PopulationFrame, SampleView, Schema};
