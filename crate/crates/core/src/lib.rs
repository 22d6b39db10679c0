//! Random-shuffling full-matrix AdaGrad (SHAdaGrad) for finite-sum problems,
//! with SGD and fixed-perturbation AdaGrad baselines, numerical checks of the
//! matrix inequalities the convergence analysis relies on, and an experiment
//! harness.

// NaN must fail these guards, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod history;
pub mod linalg;
pub mod optimizers;
pub mod problems;
pub mod sampling;

pub use error::{Error, Result};
