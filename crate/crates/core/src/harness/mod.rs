//! Experiment orchestration: configured runs, pruning-speed sweeps and
//! resource-accuracy reports.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{PhaseConfig, RunConfig, SweepConfig};
pub use run::{run_config, Experiment, MetricsRow, Outputs, RunState, TraceRow};
