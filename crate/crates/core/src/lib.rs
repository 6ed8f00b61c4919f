//! Probabilistic mode-choice and mode-shift simulation engine.
//!
//! The crate models how travelers pick among six urban travel modes, fits
//! the model's behavioral parameters by Bayesian grid inference against
//! observed demand (with a neural-network likelihood surrogate for speed),
//! and translates counterfactual policy scenarios into citywide impacts on
//! travel time, cost, vehicle miles, fuel, emissions, and revenue.

pub mod cli;
pub mod closed_form;
pub mod error;
pub mod impact;
pub mod inference;
pub mod io;
pub mod mc;
pub mod surrogate;
pub mod types;

pub use error::{Error, Result};
