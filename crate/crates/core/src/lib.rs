//! Probabilistic tabular price modelling: feature pipeline, the ProbSAINT
//! network and its baselines, training, evaluation, synthetic market data
//! and duration forecasting.

pub mod checkpoint;
pub mod error;
pub mod features;
pub mod forecast;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result, RowError};
