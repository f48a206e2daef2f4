// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment runner: world generation, pretraining, editing arms, sweeps,
//! results streams, tables and plots.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::{ArmConfig, ArmVariant, ExperimentConfig, SweepAxis, SweepConfig, BASE_ARM};
pub use error::{RunError, RunResult, Stage};
pub use pipeline::{cmd_pipeline, EditLog, Lab, Layout, PretrainReport, ResultRecord, RunArtifacts};
pub use report::{cmd_report, read_results, report_rows, Metric, ReportRow};
