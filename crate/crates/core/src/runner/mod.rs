//! Experiment orchestration behind the `cpl` command line.

pub mod config;
pub mod episode;
pub mod experiment;
pub mod stats;
pub mod trace;

pub use config::{ExperimentConfig, Method, Scenario};
pub use experiment::{
    run_coverage, run_coverage_report, run_rollout, run_sweep, run_train_predictor, run_verify,
};
pub use trace::{parse_traces, StepLog, SweepRow};
