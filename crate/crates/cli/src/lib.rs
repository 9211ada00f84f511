//! Experiment harness for split HMC: TOML configs in, chains, diagnostics,
//! metric reports and SVG figures out.
//!
//! Each subcommand of the `split-hmc` binary is a plain function here so
//! that tests can drive the same code paths.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod plot;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use evaluate::cmd_evaluate;
pub use plot::cmd_plot;
pub use run::{cmd_baseline, cmd_sample};
