//! Time-varying forecast combination.
//!
//! Combination weights `beta_t = (omega_0t, omega_1t')'` in
//! `y_{t+1} = X_t' beta_t + e_{t+1}` are estimated by reflected
//! leave-one-out local linear kernel regression ([`smoother`]), with the
//! bandwidth chosen by cross-validation ([`bandwidth`]). With many candidate
//! forecasts a two-stage Lasso / group-SCAD estimator selects the relevant
//! ones ([`sparse`]). [`baselines`] holds the usual competing schemes,
//! [`evaluation`] the forecast-accuracy tests, and [`simulation`] the Monte
//! Carlo designs.

pub mod bandwidth;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod panel;
pub mod simulation;
pub mod smoother;
pub mod sparse;

pub use error::{Error, Result};
pub use panel::{ForecastPanel, Standardizer};
pub use smoother::{KernelSpec, LocalFit, WeightPath};
