//! Held-out perplexity, the analytical FLOPs model and the sweep harness.

mod eval;
mod flops;
mod sweep;

use thiserror::Error;

pub use eval::{perplexity, EvalReport};
pub use flops::{
    forward_flops, layer_pass_flops, reference_ratios, FlopsReport, LayerFlops, LayerPassFlops, ReferenceRatios,
    REPORTED_BASELINE, REPORTED_DOUBLED_DEPTH, REPORTED_REUSE_SINGLE_LAYER,
};
pub use sweep::{derive_seeds, sweep, SummaryRow, SweepRow, SweepSpec, SweepTable};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("test split has {len} tokens, fewer than one window of {need}")]
    EmptySplit { len: usize, need: usize },
    #[error("sweep needs at least one strategy")]
    NoStrategies,
    #[error("sweep needs at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Recurrence(#[from] crate::recurrence::RecurrenceError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("results table: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;
