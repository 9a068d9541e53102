//! Non-parametric attention by representative-vector extraction.
//!
//! Given a feature volume, the extractor repeatedly anchors on the most
//! active unsuppressed position, refines the anchor into a similarity-weighted
//! average of all feature vectors, and suppresses the positions it covered.
//! The weights of each step form one attention map.

mod extract;
mod gradcheck;
mod layer;
mod volume;

use thiserror::Error;

use crate::autograd::AutogradError;

pub use extract::{
    extract_representatives, similarity_map, AttentionMap, AttentionStack, Extraction,
    FeatureMatrix, NpaConfig, SelectionMode, StepTrace,
};
pub use gradcheck::{
    npa_gradcheck, probe_gradients, random_volume, GradcheckReport, CLAMP_MARGIN, TIE_MARGIN,
};
pub use layer::{concat_representatives, npa_forward};
pub use volume::{activation_scores, ActivationMap, FeatureVolume};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NpaError {
    #[error("volume extents must be positive, got {channels}×{height}×{width}")]
    EmptyVolume {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("volume data holds {actual} values, expected {expected}")]
    VolumeLength { expected: usize, actual: usize },
    #[error("expected a rank-3 C×H×W array, got shape {shape:?}")]
    VolumeRank { shape: Vec<usize> },
    #[error("N exceeds spatial positions: N = {n}, H·W = {positions}")]
    TooManyRepresentatives { n: usize, positions: usize },
    #[error("position {index} out of range for {positions} spatial positions")]
    IndexOutOfRange { index: usize, positions: usize },
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}
