//! Reinforcement-learned adaptive patching for time-series forecasting.

pub mod adaptation;
pub mod backbone;
pub mod cli;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod partition;
pub mod persistence;
pub mod pipeline;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
