//! Bi-level meta-gradient toolkit.
//!
//! Computes task meta-gradients four ways: implicitly via conjugate
//! gradient on the curvature-shifted system, by full path differentiation,
//! first-order, and by the proximal-point update, over a minimal
//! reverse-mode autodiff core, verifies them against closed-form and
//! finite-difference oracles on quadratic task families, and runs
//! desk-scale accuracy/compute/memory trade-off experiments.

pub mod autodiff;
pub mod tasks;
pub mod model;
pub mod cg;
pub mod solvers;
pub mod oracle;
pub mod meta;
pub mod config;
pub mod trainer;
pub mod error;
pub mod telemetry;

pub use error::{Error, Result};
