//! Experiment harness: configs, toy datasets, the training loop, analysis
//! and run comparison behind the `velora` binary.

pub mod analyze;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod network;
pub mod presets;
pub mod train;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Overrides};
pub use train::{run_training, TrainError, TrainOutcome};
