//! Split Hamiltonian Monte Carlo for Bayesian neural networks.
//!
//! The crate provides the pieces needed to sample a network posterior with
//! data-sharded Hamiltonian integrators and to judge the result:
//!
//! - [`numeric`]: mass matrix, kinetic energy, seeded random streams
//! - [`autodiff`], [`model`], [`potential`]: MLP posteriors with exact gradients
//! - [`integrators`]: full leapfrog plus naive, randomised and symmetric splits
//! - [`sampler`]: the HMC driver with Metropolis–Hastings correction
//! - [`sg`]: SGD, SGLD and SGHMC baselines
//! - [`diagnostics`], [`uncertainty`]: chain quality and predictive metrics
//! - [`datasets`]: synthetic data, sharding, normalisation

pub mod autodiff;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod integrators;
pub mod model;
pub mod numeric;
pub mod potential;
pub mod sampler;
pub mod sg;
pub mod targets;
pub mod uncertainty;

pub use error::{Error, Result};
