//! Experiment harness around `aimrl`: build environments, collect
//! datasets, train with any mixer, evaluate saved policies and compare
//! methods, writing plain data files throughout.

pub mod commands;
pub mod config;
pub mod myopic;
pub mod report;

pub use commands::{cmd_collect, cmd_compare, cmd_evaluate, cmd_train, EvaluateArgs, Overrides};
pub use config::ExperimentConfig;
pub use report::{ComparisonRow, ComparisonTable, EvaluationReport, TrainSummary};
