//! Experiment orchestration: dataset, split, model training, baselines,
//! scoring and report files, with per-stage resume.
//!
//! Reports written by [`run_experiment`] under the output directory:
//! `split.json`, `checkpoints/`, `cpd_baseline.csv`,
//! `cpd_baseline_traces.csv`, `ml_baseline.csv`, `model_scores.csv`,
//! `summary.json`, `timeline.csv` and `timings.json`. Everything except the
//! timings is a pure function of the configuration.

mod config;
mod experiment;
mod grid;
mod transfer;

pub use config::{CpdGrid, DatasetSource, ExperimentConfig, MlGrid};
pub use experiment::{
    improvement, make_splits, run_cpd, run_experiment, run_ml, Comparison, CpdResults, CpdRow, CpdTraceRow,
    ExperimentOutcome, MlRow, Splits, Summary, VariantScore, STAGES, write_cpd, write_ml, write_model_scores, write_timeline,
};
pub use grid::{grid_search, kernel_schedule, write_grid, GridRow, GridSearchConfig, ModelGrid, DEFAULT_GRID_CAP};
pub use transfer::{transfer_experiment, write_transfer, FoldResult, TransferConfig, TransferReport};
