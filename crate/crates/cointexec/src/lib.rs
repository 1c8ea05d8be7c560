//! Optimal liquidation of a basket of co-integrated assets with permanent and
//! temporary price impact.
//!
//! The crate solves the closed-form optimal execution problem for a portfolio
//! of m traded assets whose midprices co-move with n ≥ m observed assets
//! through a mean-reverting (co-integrated) factor structure, backtests the
//! resulting strategies against a correlated-Brownian benchmark under Monte
//! Carlo with common random numbers, and estimates the continuous-time model
//! from sampled midprice data via a VAR(1) regression with Johansen's rank
//! test.
//!
//! Module map:
//! - [`model`]: market-model types, invariants, validation, JSON schema.
//! - [`riccati`]: backward solver for the block matrix Riccati problem,
//!   series coefficients of the guaranteed-liquidation limit, closed-form
//!   comparison oracle.
//! - [`value_terms`]: linear value-function terms for affine order flow, by
//!   coefficient ODEs and by time-ordered-exponential quadrature.
//! - [`strategy`]: UL / RL / ULT / AC / series-tail speed engines.
//! - [`sim`]: Monte Carlo simulator and strategy comparison statistics.
//! - [`estimation`]: VAR(1) fit, co-integration rank and weights, microprice
//!   preprocessing.
//! - [`presets`]: bundled five-stock Nasdaq calibration.

pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod presets;
pub mod riccati;
pub mod rng;
pub mod sim;
pub mod strategy;
pub mod value_terms;

pub use error::{CointexecError, Result};
