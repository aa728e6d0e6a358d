//! Configuration-driven runner for clock-ensemble time-scale experiments.
//!
//! A scenario is a TOML file describing the ensemble model, initial conditions, filters,
//! the transformation-matrix optimizer and the outputs. [`scenario::run_scenario`] runs it
//! end to end; the [`commands`] module exposes each stage as a subcommand working on the
//! CSV/JSON artifacts defined in [`artifacts`].

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod scenario;

pub use error::{CliError, CliResult};
