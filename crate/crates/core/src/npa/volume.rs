use crate::autograd::Tensor;

use super::NpaError;

/// `C×H×W` block of feature vectors stored channel-major.
///
/// Spatial positions use a flat index `i ∈ [0, H·W)` with
/// `(h, w) = (i / W, i % W)`; the vector at `i` is `data[c·H·W + i]` for
/// `c ∈ [0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, NpaError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(NpaError::EmptyVolume {
                channels,
                height,
                width,
            });
        }
        if data.len() != channels * height * width {
            return Err(NpaError::VolumeLength {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self, NpaError> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    /// Builds a volume from per-position vectors given in flat-index order.
    pub fn from_vectors(
        height: usize,
        width: usize,
        vectors: &[Vec<f64>],
    ) -> Result<Self, NpaError> {
        let channels = vectors.first().map_or(0, Vec::len);
        if vectors.len() != height * width || vectors.iter().any(|v| v.len() != channels) {
            return Err(NpaError::VolumeLength {
                expected: height * width * channels,
                actual: vectors.iter().map(Vec::len).sum(),
            });
        }
        let hw = height * width;
        let mut data = vec![0.0; channels * hw];
        for (i, v) in vectors.iter().enumerate() {
            for (c, x) in v.iter().enumerate() {
                data[c * hw + i] = *x;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, NpaError> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(NpaError::VolumeRank {
                shape: t.shape().to_vec(),
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("validated extents")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H·W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn flat_index(&self, h: usize, w: usize) -> usize {
        h * self.width + w
    }

    /// Copy of the feature vector at flat position `index`.
    pub fn vector(&self, index: usize) -> Vec<f64> {
        let hw = self.positions();
        (0..self.channels)
            .map(|c| self.data[c * hw + index])
            .collect()
    }

    /// Euclidean norm of every feature vector.
    pub fn norms(&self) -> Vec<f64> {
        activation_scores(self)
            .scores
            .into_iter()
            .map(f64::sqrt)
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Per-position activation scores `a_i` in squared-norm units.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub scores: Vec<f64>,
}

/// `a_i = ‖f_i‖²` for every spatial position.
pub fn activation_scores(volume: &FeatureVolume) -> ActivationMap {
    let hw = volume.positions();
    let mut scores = vec![0.0; hw];
    for plane in volume.data.chunks_exact(hw) {
        for (a, v) in scores.iter_mut().zip(plane) {
            *a += v * v;
        }
    }
    ActivationMap { scores }
}
