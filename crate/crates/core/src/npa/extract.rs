use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::{activation_scores, FeatureVolume};
use super::NpaError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Highest current activation score, lowest index on ties.
    Active,
    /// Seeded uniform draw without replacement.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpaConfig {
    /// Number of representatives.
    pub n: usize,
    pub selection: SelectionMode,
    pub refine: bool,
    /// Cosine similarities are clamped below at this value.
    pub similarity_floor: f64,
    /// Guards norms and the weight normalizer against division by zero.
    pub norm_epsilon: f64,
    pub seed: u64,
}

impl Default for NpaConfig {
    fn default() -> Self {
        Self {
            n: 3,
            selection: SelectionMode::Active,
            refine: true,
            similarity_floor: 0.0,
            norm_epsilon: 1e-12,
            seed: 0,
        }
    }
}

impl NpaConfig {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_selection(mut self, selection: SelectionMode) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_refine(mut self, refine: bool) -> Self {
        self.refine = refine;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), NpaError> {
        if self.n == 0 {
            return Err(NpaError::InvalidConfig("n must be at least 1".into()));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(NpaError::InvalidConfig(
                "norm_epsilon must be positive".into(),
            ));
        }
        if !self.similarity_floor.is_finite() {
            return Err(NpaError::InvalidConfig(
                "similarity_floor must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// One attention map with its selection metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Weight per flat spatial position.
    pub weights: Vec<f64>,
    /// Selected anchor position.
    pub index: usize,
    /// 1-based extraction order.
    pub rank: usize,
    /// Activation score of the anchor at the moment it was chosen.
    pub score: f64,
    /// Set when the map fell back to one-hot because activations or
    /// similarities were exhausted.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<AttentionMap>,
}

impl AttentionStack {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn indices(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.index).collect()
    }

    /// Builds a stack from raw weight maps (e.g. read from disk); anchors
    /// are taken as each map's argmax.
    pub fn from_weights(
        height: usize,
        width: usize,
        maps: Vec<Vec<f64>>,
    ) -> Result<Self, NpaError> {
        let hw = height * width;
        let mut out = Vec::with_capacity(maps.len());
        for (k, weights) in maps.into_iter().enumerate() {
            if weights.len() != hw {
                return Err(NpaError::VolumeLength {
                    expected: hw,
                    actual: weights.len(),
                });
            }
            let index = argmax_lowest(&weights, |_| true).unwrap_or(0);
            out.push(AttentionMap {
                weights,
                index,
                rank: k + 1,
                score: f64::NAN,
                fallback: false,
            });
        }
        Ok(Self {
            height,
            width,
            maps: out,
        })
    }

    /// Reorders maps by `order` (new rank `k` takes old map `order[k]`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let maps = order
            .iter()
            .enumerate()
            .map(|(k, &src)| AttentionMap {
                rank: k + 1,
                ..self.maps[src].clone()
            })
            .collect();
        Self {
            maps,
            ..self.clone()
        }
    }
}

/// `N×C` matrix of representative vectors in extraction order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    /// Row-major concatenation `f̂_1 ‖ … ‖ f̂_N`.
    pub fn concat(&self) -> Vec<f64> {
        self.data.clone()
    }
}

/// Intermediate quantities of one extraction step, kept for the reverse
/// pass and for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub index: usize,
    /// `true` when weights came from similarities (not one-hot).
    pub refined: bool,
    /// Raw cosine similarity to the anchor (empty when not refined).
    pub cosine: Vec<f64>,
    /// Clamped similarities.
    pub similarity: Vec<f64>,
    /// Sum of clamped similarities.
    pub total: f64,
    /// Relative gap between the best and second-best eligible score
    /// (`+∞` when not applicable).
    pub selection_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub features: FeatureMatrix,
    pub stack: AttentionStack,
    pub steps: Vec<StepTrace>,
    /// Activation scores before the first step and after each step.
    pub activations: Vec<Vec<f64>>,
    /// Per-position norms (clamped only at use sites).
    pub norms: Vec<f64>,
}

impl Extraction {
    pub fn into_parts(self) -> (FeatureMatrix, AttentionStack) {
        (self.features, self.stack)
    }

    /// Whether any map fell back to a one-hot selection.
    pub fn degenerate(&self) -> bool {
        self.stack.maps.iter().any(|m| m.fallback)
    }

    /// Smallest relative gap between the winning and runner-up score.
    pub fn min_selection_gap(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.selection_gap)
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest distance of a non-anchor cosine to the clamp floor.
    pub fn min_clamp_margin(&self, floor: f64) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.refined)
            .flat_map(|s| {
                s.cosine
                    .iter()
                    .enumerate()
                    .filter(move |(i, _)| *i != s.index)
                    .map(move |(_, c)| (c - floor).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn argmax_lowest(values: &[f64], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Cosine similarity of every position to `reference`, clamped below at
/// `floor`. Norms are guarded by `epsilon`; the reference itself gets 1
/// whenever its norm exceeds `epsilon`.
pub fn similarity_map(
    volume: &FeatureVolume,
    reference: usize,
    floor: f64,
    epsilon: f64,
) -> Result<Vec<f64>, NpaError> {
    let hw = volume.positions();
    if reference >= hw {
        return Err(NpaError::IndexOutOfRange {
            index: reference,
            positions: hw,
        });
    }
    let norms = volume.norms();
    let cosine = cosine_to(volume, &norms, reference, epsilon);
    Ok(clamp_similarity(
        &cosine,
        reference,
        norms[reference],
        floor,
        epsilon,
    ))
}

pub(crate) fn cosine_to(
    volume: &FeatureVolume,
    norms: &[f64],
    reference: usize,
    epsilon: f64,
) -> Vec<f64> {
    let hw = volume.positions();
    let data = volume.data();
    let mut dots = vec![0.0; hw];
    for plane in data.chunks_exact(hw) {
        let r = plane[reference];
        if r == 0.0 {
            continue;
        }
        for (d, v) in dots.iter_mut().zip(plane) {
            *d += v * r;
        }
    }
    let m_ref = norms[reference].max(epsilon);
    dots.iter()
        .zip(norms)
        .map(|(d, n)| d / (n.max(epsilon) * m_ref))
        .collect()
}

fn clamp_similarity(
    cosine: &[f64],
    reference: usize,
    ref_norm: f64,
    floor: f64,
    epsilon: f64,
) -> Vec<f64> {
    let mut s: Vec<f64> = cosine.iter().map(|c| c.max(floor)).collect();
    if ref_norm > epsilon {
        s[reference] = 1.0_f64.max(floor);
    }
    s
}

/// Extracts `config.n` representative vectors and their attention maps.
///
/// Each step picks an anchor (highest remaining activation, or a seeded
/// random draw), weights every position by its clamped cosine similarity to
/// the anchor normalized to sum 1, averages the feature vectors with those
/// weights, and suppresses activations by `(1 − w_i)`. Anchors already chosen
/// are not eligible again. When no eligible activation is positive, or the
/// similarities vanish, the step falls back to a one-hot map at the
/// lowest-index unselected position and is flagged.
pub fn extract_representatives(
    volume: &FeatureVolume,
    config: &NpaConfig,
) -> Result<Extraction, NpaError> {
    config.validate()?;
    let hw = volume.positions();
    let c = volume.channels();
    if config.n > hw {
        return Err(NpaError::TooManyRepresentatives {
            n: config.n,
            positions: hw,
        });
    }
    let eps = config.norm_epsilon;
    let data = volume.data();
    let mut scores = activation_scores(volume).scores;
    let norms: Vec<f64> = scores.iter().map(|a| a.sqrt()).collect();
    let mut selected = vec![false; hw];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut activations = vec![scores.clone()];
    let mut features = Vec::with_capacity(config.n * c);
    let mut maps = Vec::with_capacity(config.n);
    let mut steps = Vec::with_capacity(config.n);

    for rank in 1..=config.n {
        let (index, gap, exhausted) = match config.selection {
            SelectionMode::Active => {
                let best = argmax_lowest(&scores, |i| !selected[i]).expect("n ≤ positions");
                if scores[best] > 0.0 {
                    let second = argmax_lowest(&scores, |i| !selected[i] && i != best);
                    let gap =
                        second.map_or(f64::INFINITY, |s| (scores[best] - scores[s]) / scores[best]);
                    (best, gap, false)
                } else {
                    let first_free = (0..hw).find(|&i| !selected[i]).expect("n ≤ positions");
                    (first_free, f64::INFINITY, true)
                }
            }
            SelectionMode::Random => {
                let free: Vec<usize> = (0..hw).filter(|&i| !selected[i]).collect();
                (free[rng.random_range(0..free.len())], f64::INFINITY, false)
            }
        };
        selected[index] = true;
        let score = scores[index];

        let mut step = StepTrace {
            index,
            refined: false,
            cosine: Vec::new(),
            similarity: Vec::new(),
            total: 0.0,
            selection_gap: gap,
        };
        let mut weights = vec![0.0; hw];
        let mut fallback = exhausted;
        if config.refine && !exhausted && norms[index] > eps {
            let cosine = cosine_to(volume, &norms, index, eps);
            let similarity =
                clamp_similarity(&cosine, index, norms[index], config.similarity_floor, eps);
            let total: f64 = similarity.iter().sum();
            if total > eps {
                for (w, s) in weights.iter_mut().zip(&similarity) {
                    *w = s / total;
                }
                step.refined = true;
                step.cosine = cosine;
                step.similarity = similarity;
                step.total = total;
            } else {
                fallback = true;
            }
        } else if config.refine {
            fallback = true;
        }

        if step.refined {
            let mut row = vec![0.0; c];
            for (r, plane) in row.iter_mut().zip(data.chunks_exact(hw)) {
                *r = plane.iter().zip(&weights).map(|(v, w)| v * w).sum();
            }
            features.extend_from_slice(&row);
        } else {
            weights[index] = 1.0;
            features.extend(volume.vector(index));
        }

        for (a, w) in scores.iter_mut().zip(&weights) {
            *a *= 1.0 - w;
        }
        activations.push(scores.clone());
        steps.push(step);
        maps.push(AttentionMap {
            weights,
            index,
            rank,
            score,
            fallback,
        });
    }

    Ok(Extraction {
        features: FeatureMatrix {
            rows: config.n,
            cols: c,
            data: features,
        },
        stack: AttentionStack {
            height: volume.height(),
            width: volume.width(),
            maps,
        },
        steps,
        activations,
        norms,
    })
}
