//! Experiment runner for the federated few-shot simulator in
//! `fedfsl-core`: configuration files, dataset loading, checkpoints,
//! metrics CSVs, run orchestration and run comparison.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod runner;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, train_seed, SeedRun};
pub use metrics::compare_runs;
pub use runner::ParallelClients;
