//! Experiment harness behind the `confbound` binary: manifests, the
//! train/bounds/evaluate pipeline, and report and CSV emission.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{HarnessError, Result};
pub use manifest::{ExperimentManifest, GammaChoice, LoadedManifest, OracleAggregate, RunSpec};
pub use pipeline::{evaluate, train_all, Experiment, PointsSource, TrainedRun};
pub use report::{BoundRow, EvaluationReport, ModelSummary};
