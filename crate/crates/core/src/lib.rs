//! Numerical laboratory for the stochastic porous media / fast diffusion equation
//! `dX - Δψ(X) dt = X dW` with a maximal monotone `ψ`.
//!
//! The crate integrates the regularized equation
//! `dX + (ν - Δ)(ψ_λ(X) + λX) dt = X dW` with a drift-implicit Euler–Maruyama
//! scheme on truncated spectral boxes, and runs Monte Carlo studies of moment
//! bounds, regularization rates, positivity, mass behaviour and finite-time
//! extinction.

pub mod error;
pub mod ensemble;
pub mod graph;
pub mod noise;
pub mod observables;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
