//! Toy convolutional classifier with NPA, learned-attention and average
//! pooling heads, the distillation trainer and the attention experiments.

mod config;
mod experiments;
mod gradcheck;
mod loss;
mod model;
mod train;

use thiserror::Error;

use crate::autograd::AutogradError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::npa::NpaError;

pub use config::{ExperimentConfig, HeadKind, KERNEL, PADDING};
pub use experiments::{
    aux_isolation_check, distill_resolution_study, run_ablation_grid, run_rank_head_experiment,
    AblationReport, AblationRow, Assertion, DistillReport, ModelSummary, RankHeadReport,
    RankHeadRow, ABLATION_MARGIN, DISTILL_TOLERANCE,
};
pub use gradcheck::{network_gradcheck, NetworkGradcheck};
pub use loss::{distillation_loss, DistillTerms};
pub use model::{
    learned_attention_head, LearnedAttentionParams, Model, SampleOutput, EVAL_EPOCH, RANK_SUBSETS,
};
pub use train::{evaluate, load_teacher, train, train_on, EpochRecord, EvalResult, TrainedModel};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("input shape {actual:?} does not match the expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("extent mismatch: {0}")]
    Extent(String),
    #[error("parameter layout: {0}")]
    Layout(String),
    #[error(
        "training diverged at epoch {epoch}, step {step}: first non-finite tensor is {tensor}"
    )]
    Divergence {
        epoch: usize,
        step: usize,
        tensor: String,
    },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Npa(#[from] NpaError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
