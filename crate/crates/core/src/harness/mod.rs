//! Experiment orchestration: configs, the round loop, metrics and comparisons.

pub mod compare;
pub mod config;
pub mod metrics;
pub mod sim;

pub use compare::{compare, ComparisonReport, ComparisonRow};
pub use config::{
    Bootstrap, DataSource, ExperimentConfig, Seeds, Strategy, ThresholdMode, TraceConfig,
};
pub use metrics::{ClientRecord, MetricsLog, RoundRecord};
pub use sim::{run_experiment, run_with_environment, Environment, Simulation};
