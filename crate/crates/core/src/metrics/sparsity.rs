use serde::{Deserialize, Serialize};

use crate::npa::{AttentionStack, FeatureVolume};

use super::MetricsError;

/// `s = a_max / a_mean` of the norm-weighted mean attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub s: f64,
    pub a_max: f64,
    pub a_mean: f64,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn check_extents(
    stack: &AttentionStack,
    volume: &FeatureVolume,
) -> Result<(), MetricsError> {
    if stack.height != volume.height() || stack.width != volume.width() {
        return Err(MetricsError::ShapeMismatch {
            stack: (stack.height, stack.width),
            volume: (volume.height(), volume.width()),
        });
    }
    if stack
        .maps
        .iter()
        .any(|m| m.weights.len() != stack.positions())
    {
        return Err(MetricsError::ShapeMismatch {
            stack: (stack.height, stack.width),
            volume: (volume.height(), volume.width()),
        });
    }
    Ok(())
}

/// Norm-weighted mean map: `(1/N)·Σ_k w_k(i) · ‖f_i‖`.
pub fn weighted_mean_map(
    stack: &AttentionStack,
    volume: &FeatureVolume,
) -> Result<Vec<f64>, MetricsError> {
    check_extents(stack, volume)?;
    if stack.is_empty() {
        return Err(MetricsError::EmptyStack);
    }
    let n = stack.len() as f64;
    let norms = volume.norms();
    Ok((0..stack.positions())
        .map(|i| {
            let m = stack.maps.iter().map(|map| map.weights[i]).sum::<f64>() / n;
            m * norms[i]
        })
        .collect())
}

pub fn sparsity(
    stack: &AttentionStack,
    volume: &FeatureVolume,
) -> Result<SparsityReport, MetricsError> {
    let weighted = weighted_mean_map(stack, volume)?;
    let a_max = weighted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_mean = weighted.iter().sum::<f64>() / weighted.len() as f64;
    if a_mean.is_nan() || a_mean <= 0.0 {
        return Err(MetricsError::DegenerateMap);
    }
    Ok(SparsityReport {
        s: a_max / a_mean,
        a_max,
        a_mean,
        h: stack.height,
        w: stack.width,
    })
}

/// Fraction of the norm-weighted attention mass that lands on foreground
/// pixels, with map cells mapped onto an `size×size` mask by nearest
/// neighbour.
pub fn foreground_mass(
    stack: &AttentionStack,
    volume: &FeatureVolume,
    mask: &[bool],
    size: usize,
) -> Result<f64, MetricsError> {
    let weighted = weighted_mean_map(stack, volume)?;
    if mask.len() != size * size {
        return Err(MetricsError::ShapeMismatch {
            stack: (stack.height, stack.width),
            volume: (size, size),
        });
    }
    let (mut on, mut total) = (0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let cell = (y * stack.height / size) * stack.width + x * stack.width / size;
            total += weighted[cell];
            if mask[y * size + x] {
                on += weighted[cell];
            }
        }
    }
    if total > 0.0 {
        Ok(on / total)
    } else {
        Err(MetricsError::DegenerateMap)
    }
}
