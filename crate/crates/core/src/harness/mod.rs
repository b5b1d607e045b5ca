//! Experiment orchestration: configuration, runs and artifacts.

pub mod artifacts;
pub mod config;
pub mod experiments;

pub use artifacts::{Check, LemmaCheck, RunArtifacts, Status, Summary};
pub use config::{DistributionKind, Experiment, ExperimentConfig};
pub use experiments::{run, run_with_threads, threads_from_env};
