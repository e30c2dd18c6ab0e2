//! Monte-Carlo experiment orchestration, configuration and result export.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{ChannelMode, ExperimentConfig, SweepParam};
pub use experiment::{aggregate, run_experiment, run_sweep, trial_data, Aggregate, ResultSet, TrialRecord};
pub use output::emit_results;
