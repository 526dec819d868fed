//! Estimation and bootstrap inference for quantile and average treatment
//! effects in matched-pairs randomized experiments.
//!
//! The difference-in-quantiles estimator is paired with four bootstrap engines
//! ([`bootstrap::Method`]); [`inference`] turns their draws into tests and
//! bands, and [`simulation`] hosts the Monte Carlo harness.

pub mod bootstrap;
pub mod data;
pub mod design;
pub mod error;
pub mod inference;
pub mod quantile;
pub mod rng;
pub mod sieve;
pub mod simulation;

pub use error::{Error, ErrorClass, Result};
