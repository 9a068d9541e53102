use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::fd::{central_difference, relative_error, DEFAULT_STEP};
use crate::autograd::{Graph, Tensor};

use super::extract::{extract_representatives, NpaConfig};
use super::layer::npa_forward;
use super::volume::FeatureVolume;
use super::NpaError;

/// Relative score gap below which a selection counts as a near-tie.
pub const TIE_MARGIN: f64 = 1e-3;
/// Distance of a cosine to the clamp floor below which a volume counts as
/// sitting on the clamp kink.
pub const CLAMP_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub evaluated: usize,
    pub excluded_near_tie: usize,
    pub excluded_clamp_kink: usize,
    pub max_relative_error: f64,
    pub errors: Vec<f64>,
}

/// Random volume with standard-normal entries.
pub fn random_volume(
    rng: &mut ChaCha8Rng,
    channels: usize,
    height: usize,
    width: usize,
) -> FeatureVolume {
    let data = (0..channels * height * width)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    FeatureVolume::new(channels, height, width, data).expect("positive extents")
}

/// Analytic and central-difference gradients of `Σ probe ⊙ F` with respect
/// to the volume, where `F` is the extracted feature matrix.
pub fn probe_gradients(
    volume: &FeatureVolume,
    config: &NpaConfig,
    probe: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NpaError> {
    let mut graph = Graph::new();
    let input = graph.input(volume.to_tensor());
    let (features, _) = npa_forward(&mut graph, input, config)?;
    let shape = graph.value(features).shape().to_vec();
    let weights = graph.constant(Tensor::new(shape, probe.to_vec())?);
    let prod = graph.mul(features, weights)?;
    let loss = graph.sum(prod)?;
    let grads = graph.backward(loss)?;
    let analytic = grads.get(input).expect("input leaf").data().to_vec();

    let (c, h, w) = (volume.channels(), volume.height(), volume.width());
    let numeric = central_difference(
        |x| {
            let v = FeatureVolume::new(c, h, w, x.to_vec()).expect("same extents");
            let ex = extract_representatives(&v, config).expect("validated config");
            ex.features.data.iter().zip(probe).map(|(a, b)| a * b).sum()
        },
        volume.data(),
        DEFAULT_STEP,
    );
    Ok((analytic, numeric))
}

/// Compares analytic and finite-difference gradients on `trials` random
/// volumes of the given shape. Volumes whose selections sit within
/// [`TIE_MARGIN`] of a tie, or whose cosines sit within [`CLAMP_MARGIN`] of
/// the clamp floor, are skipped and counted.
pub fn npa_gradcheck(
    shape: (usize, usize, usize),
    config: &NpaConfig,
    trials: usize,
    seed: u64,
) -> Result<GradcheckReport, NpaError> {
    let (c, h, w) = shape;
    if h * w > 64 || c > 16 {
        return Err(NpaError::InvalidConfig(format!(
            "gradcheck is limited to H·W ≤ 64 and C ≤ 16, got {c}×{h}×{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let volume = random_volume(&mut rng, c, h, w);
        let probe: Vec<f64> = (0..config.n * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let ex = extract_representatives(&volume, config)?;
        if ex.min_selection_gap() < TIE_MARGIN {
            report.excluded_near_tie += 1;
            continue;
        }
        if config.refine && ex.min_clamp_margin(config.similarity_floor) < CLAMP_MARGIN {
            report.excluded_clamp_kink += 1;
            continue;
        }
        let (analytic, numeric) = probe_gradients(&volume, config, &probe)?;
        let err = relative_error(&analytic, &numeric);
        report.max_relative_error = report.max_relative_error.max(err);
        report.errors.push(err);
        report.evaluated += 1;
    }
    Ok(report)
}
