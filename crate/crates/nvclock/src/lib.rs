//! Desk-scale simulator and analysis toolkit for a temperature-compensated
//! composite frequency reference built from the NV-center electron (D) and
//! nuclear (Q) spin transitions.

pub mod cli;
pub mod clock_composer;
pub mod config;
pub mod error;
pub mod noise_stats;
pub mod pulse_engine;
pub mod scenario_runner;
pub mod spin_model;

pub use error::{Error, Result};
