//! Forward and inverse sigma-point Kalman filtering.
//!
//! One generic recursion covers the cubature, Gauss-Hermite quadrature and
//! unscented filters; the inverse counterparts estimate what a forward
//! filter has inferred, from noisy observations of the actions it takes.
//! Recursive Cramer-Rao lower bounds and a seeded Monte-Carlo harness
//! provide the evaluation side, with coordinated-turn tracking and a Lorenz
//! system as the benchmark models.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod forward;
pub mod inverse;
pub mod models;
pub mod numerics;
pub mod points;

pub use error::{Error, Result};
