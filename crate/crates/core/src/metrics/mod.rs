//! Attention sparsity and rank-coloured rendering.

mod render;
mod sparsity;

use thiserror::Error;

pub use render::{overlay, render, RenderedAttention, RgbImage};
pub use sparsity::{foreground_mass, sparsity, weighted_mean_map, SparsityReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("attention stack is {stack:?} (H×W) but volume is {volume:?}")]
    ShapeMismatch {
        stack: (usize, usize),
        volume: (usize, usize),
    },
    #[error("attention stack holds no maps")]
    EmptyStack,
    #[error("degenerate map: norm-weighted attention is zero everywhere")]
    DegenerateMap,
    #[error("cannot render {n} maps in one RGB image; render at most 3 at a time (e.g. one map per image)")]
    TooManyMaps { n: usize },
    #[error("image size mismatch: expected {expected:?}, got {actual:?}")]
    ImageSize {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("blend {0} outside [0, 1]")]
    InvalidBlend(f64),
    #[error("image encoding failed: {0}")]
    Encode(String),
}
