//! Training loop, optimizers, metrics and run manifests.

mod config;
mod metrics;
mod optim;
mod run;

pub use config::{Objective, OptimizerKind, TrainConfig, WeightPolicyKind};
pub use metrics::{metrics_header, metrics_row, MetricsWriter, RunManifest};
pub use optim::{optimizer_step, Optimizer};
pub use run::{evaluate_margins, pairwise_dimension_correlation, steps_per_epoch, train, train_with, StepRecord};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::objectives::ObjectiveError;
use crate::policy::PolicyError;
use crate::prefdata::DataError;
use crate::weights::WeightError;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: DataError,
    },
    #[error("example {index}: {len} tokens do not fit the context window of {window}")]
    InputTooLong { index: usize, len: usize, window: usize },
    #[error("gradient covers {found} of {expected} parameters")]
    MissingGradient { expected: usize, found: usize },
    #[error("correlation needs at least 3 records, got {0}")]
    TooFewRecords(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
