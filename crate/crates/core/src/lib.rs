//! Flexible Bayesian additive joint models for longitudinal and
//! time-to-event data.
//!
//! The hazard of subject `i` is
//! `h_i(t) = exp(η_λi(t) + η_γi + η_αi(t) η_μi(t))` and the marker follows
//! `y_ij = η_μi(t_ij) + ε_ij`, `ε_ij ~ N(0, exp(η_σi)²)`. Each predictor is a
//! sum of P-spline, linear, random-intercept and functional-random-intercept
//! terms. Estimation is by blockwise Newton-Raphson (posterior mode) or by
//! derivative-based Metropolis-Hastings (posterior mean).

pub mod basis;
pub mod cli;
pub mod derivatives;
pub mod likelihood;
pub mod linalg;
pub mod metrics;
pub mod mcmc;
pub mod mode;
pub mod model;
pub mod predict;
pub mod simulate;

pub use model::{JointData, ModelSpec, ModelState, Predictor, TermKind, TermSpec};
