//! Numerical solver and verification suite for linear-quadratic optimal
//! control of backward stochastic differential equations.
//!
//! The pipeline solves the stochastic Riccati-type equation for (Sigma,
//! Lambda), the auxiliary backward equation for (phi, beta), and the forward
//! equation for the adjoint state X, then assembles the optimal triple
//! (Y*, Z*, X*) and the control u* = R^{-1} B^T X* through the decoupling
//! formulas. Verification cross-checks the construction against model-free
//! oracles: residuals of the coupled optimality system, the stationarity
//! condition, a variational expansion of the cost, and direct minimization of
//! the discretized quadratic functional by conjugate gradients.

pub mod bsde;
pub mod cost;
pub mod decouple;
pub mod error;
pub mod expr;
pub mod fields;
pub mod grid;
pub mod linalg;
pub mod pipeline;
pub mod problem;
pub mod regression;
pub mod report;
pub mod riccati;

pub use error::{Error, Result};
