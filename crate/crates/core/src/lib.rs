//! Principal-stratification toolkit for post-randomization selection bias in
//! cluster randomized trials.
//!
//! - [`model`]: strata, designs, subjects and recruited samples
//! - [`estimands`]: closed-form overall and recruited-population ATEs, plus a
//!   brute-force replay oracle
//! - [`datagen`]: covariates, latent strata, cluster randomization, quota
//!   recruitment and random-intercept outcomes
//! - [`estimators`]: ITT contrast and REML random-intercept model
//! - [`harness`]: Monte Carlo scenarios and performance metrics
//! - [`figure1`]: the three-stratum worked example

pub mod cli;
pub mod datagen;
pub mod error;
pub mod estimands;
pub mod estimators;
pub mod figure1;
pub mod harness;
pub mod model;
pub mod optimize;
pub mod rng;

pub use error::{Error, Result};
