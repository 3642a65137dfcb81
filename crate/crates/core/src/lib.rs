//! Sensitivity of diffusion expectations to drift and volatility
//! uncertainty: a nested Monte Carlo estimator, closed-form and quadrature
//! references, and a one-dimensional finite-difference oracle.

// Validation is written as `!(x > 0.0)` so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod boundary;
pub mod cli;
pub mod engine;
pub mod error;
pub mod fd_oracle;
pub mod model;
pub mod numeric;
pub mod quadrature;
pub mod sampling;

pub use boundary::{Boundary, FnBoundary, Growth, Quartic, Sine};
pub use engine::{estimate, McConfig, Sensitivity, SensitivityReport};
pub use error::{Error, Result};
pub use model::{BaselineModel, EvalPoint, UncertaintySpec};
