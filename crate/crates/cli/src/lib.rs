//! Experiment runner for the mixture-of-experts lab: config parsing, seed
//! and grid sweeps, report comparison and expert-usage counts.

pub mod compare;
pub mod config;
pub mod error;
pub mod sweep;

pub use config::{DatasetKind, ExperimentConfig, Grid, GridPoint, Regime, TrainFields};
pub use error::CliError;
pub use sweep::{RunOutcome, SweepSummary};
