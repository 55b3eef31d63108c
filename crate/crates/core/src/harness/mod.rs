//! Benchmark protocol: data, victims, metrics, grid search, tuning, reports.

pub mod config;
pub mod dataset;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod tune;
pub mod victims;

use thiserror::Error;

use crate::attack::AttackError;
use crate::augment::AugmentError;
use crate::engine::EngineError;
use crate::methods::MethodError;
use crate::models::ModelError;

pub use dataset::{gen_dataset, Dataset, DatasetConfig, Splits};
pub use grid::{enumerate_grid, grid_search, Combination, GridOutcome, GridRow};
pub use metrics::{metrics, AccuracyMatrix, Metrics};
pub use preprocess::{center_crop, preprocess, Pipeline, PreprocessStep};
pub use report::{read_csv, write_report, ReportRecord};
pub use tune::{tune_hyperparams, Candidate, SearchTable};
pub use victims::{evaluate, select_benign, Selection, Substitute, Victim, VictimEntry, VictimRegistry};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("center crop {crop} exceeds the {height}x{width} input")]
    Crop { crop: usize, height: usize, width: usize },
    #[error("only {qualifying} qualifying examples, {requested} requested")]
    NotEnoughBenign { qualifying: usize, requested: usize },
    #[error("row {0} has no unmasked victim")]
    MaskedRow(String),
    #[error("empty accuracy matrix")]
    EmptyMatrix,
    #[error("accuracy {value} at ({row}, {col}) is outside [0, 1]")]
    Accuracy { row: usize, col: usize, value: f64 },
    #[error("victim {name}: pipeline produces {got}x{got}, model expects {expected}x{expected}")]
    PipelineSize { name: String, got: usize, expected: usize },
    #[error("duplicate name {0}")]
    Duplicate(String),
    #[error("unknown name {0}")]
    Unknown(String),
    #[error("validation overlaps test")]
    Overlap,
    #[error("empty search table")]
    EmptySearch,
    #[error("config: {0}")]
    Config(String),
    #[error("bad adversarial batch file: {0}")]
    BatchFormat(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Method(#[from] MethodError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}
