//! Time-scale generation for homogeneous atomic clock ensembles.
//!
//! The crate builds the ensemble state-space model, simulates it, runs the conventional
//! Kalman filter and the structured Kalman filter (a Kalman filter on the observable
//! coordinates of an observable canonical decomposition plus an open-loop predictor for the
//! unobservable common mode), propagates the exact mean and variance of the resulting atomic
//! time, and optimizes the decomposition's transformation matrix for a mean/variance cost.

pub mod error;
pub mod extended;
pub mod filters;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod moments;
pub mod optimizer;
pub mod simulator;

pub use error::{Error, Result};
