//! Labelled-corpus runs: manifests, resumable batches, confusion-matrix
//! rates and overhead aggregates.

mod batch;
mod manifest;
mod metrics;
mod overhead;

use thiserror::Error;

pub use batch::{
    read_journal, run_batch, write_reports, write_summaries, BatchOptions, BatchOutcome, METRICS_FILE, OVERHEAD_FILE,
    REPORTS_FILE,
};
pub use manifest::{DatasetManifest, Label, ManifestEntry};
pub use metrics::{balanced_accuracy, compute_metrics, compute_run_metrics, Confusion, Metrics};
pub use overhead::{aggregate_overhead, mean_std, Overhead};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Io(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),
    #[error("report for `{0}` has no manifest entry")]
    LabelMismatch(String),
    #[error("journal write failed: {0}")]
    Journal(String),
}
