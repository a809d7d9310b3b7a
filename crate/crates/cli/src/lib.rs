//! Experiment harness: configuration, dataset caching, sweeps, result tables
//! and the verification suite.

pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod results;
pub mod verify;
