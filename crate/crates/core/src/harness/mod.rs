//! Experiment configuration, matrix execution and reporting.

pub mod config;
pub mod matrix;
pub mod report;

pub use config::{parse_config, parse_config_str, Baseline, ExperimentConfig, Overrides};
pub use matrix::{ablation_mode, read_summary, run_matrix, MatrixOutcome, Summary};
pub use report::emit_report;
