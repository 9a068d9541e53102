//! Representative extraction as a graph operation.

use crate::autograd::{CustomBackward, Graph, Tensor, Var};

use super::extract::{extract_representatives, Extraction, NpaConfig, StepTrace};
use super::volume::FeatureVolume;
use super::NpaError;

struct NpaBackward {
    channels: usize,
    positions: usize,
    epsilon: f64,
    floor: f64,
    norms: Vec<f64>,
    steps: Vec<StepTrace>,
    weights: Vec<Vec<f64>>,
}

impl CustomBackward for NpaBackward {
    fn name(&self) -> &'static str {
        "extract_representatives"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let volume = inputs[0];
        let f = volume.data();
        let (c, hw) = (self.channels, self.positions);
        let g_out = grad_output.data();
        let mut grad = vec![0.0; c * hw];

        for (k, step) in self.steps.iter().enumerate() {
            let g = &g_out[k * c..(k + 1) * c];
            let r = step.index;
            if !step.refined {
                for ch in 0..c {
                    grad[ch * hw + r] += g[ch];
                }
                continue;
            }
            let w = &self.weights[k];
            // ∂L/∂w_i = ⟨g, f_i⟩, plus the direct term w_i·g.
            let mut gw = vec![0.0; hw];
            for ch in 0..c {
                let plane = &f[ch * hw..(ch + 1) * hw];
                let gp = &mut grad[ch * hw..(ch + 1) * hw];
                let gc = g[ch];
                for i in 0..hw {
                    gw[i] += gc * plane[i];
                    gp[i] += w[i] * gc;
                }
            }
            // w = s / S
            let total = step.total;
            let dot: f64 = gw.iter().zip(&step.similarity).map(|(a, b)| a * b).sum();
            let m_ref = self.norms[r].max(self.epsilon);
            let mut alpha = vec![0.0; hw];
            let mut beta = vec![0.0; hw];
            let mut gamma = 0.0;
            for i in 0..hw {
                if i == r || step.cosine[i] <= self.floor {
                    continue;
                }
                let gs = gw[i] / total - dot / (total * total);
                let m_i = self.norms[i].max(self.epsilon);
                alpha[i] = gs / (m_i * m_ref);
                if self.norms[i] > self.epsilon {
                    beta[i] = -gs * step.cosine[i] / (m_i * self.norms[i]);
                }
                gamma += gs * step.cosine[i];
            }
            let ref_scale = if self.norms[r] > self.epsilon {
                gamma / (m_ref * self.norms[r])
            } else {
                0.0
            };
            for ch in 0..c {
                let plane = &f[ch * hw..(ch + 1) * hw];
                let f_ref = plane[r];
                let mut to_ref = 0.0;
                let gp = &mut grad[ch * hw..(ch + 1) * hw];
                for i in 0..hw {
                    gp[i] += alpha[i] * f_ref + beta[i] * plane[i];
                    to_ref += alpha[i] * plane[i];
                }
                gp[r] += to_ref - ref_scale * f_ref;
            }
        }
        vec![Some(
            Tensor::new(volume.shape().to_vec(), grad).expect("volume shape"),
        )]
    }
}

/// Records representative extraction on `volume` (a `C×H×W` node) and
/// returns the `N×C` feature-matrix node together with the full extraction.
///
/// Anchor choices are constants of the reverse pass; gradients follow the
/// similarity, normalization and averaging expressions, including both roles
/// of the anchor vector.
pub fn npa_forward(
    graph: &mut Graph,
    volume: Var,
    config: &NpaConfig,
) -> Result<(Var, Extraction), NpaError> {
    let fv = FeatureVolume::from_tensor(graph.value(volume))?;
    let extraction = extract_representatives(&fv, config)?;
    let value = Tensor::new(
        vec![extraction.features.rows, extraction.features.cols],
        extraction.features.data.clone(),
    )?;
    let rule = NpaBackward {
        channels: fv.channels(),
        positions: fv.positions(),
        epsilon: config.norm_epsilon,
        floor: config.similarity_floor,
        norms: extraction.norms.clone(),
        steps: extraction.steps.clone(),
        weights: extraction
            .stack
            .maps
            .iter()
            .map(|m| m.weights.clone())
            .collect(),
    };
    let out = graph.custom(&[volume], value, Box::new(rule))?;
    Ok((out, extraction))
}

/// Flattens the feature matrix node into `f̂_1 ‖ … ‖ f̂_N`.
pub fn concat_representatives(graph: &mut Graph, matrix: Var) -> Result<Var, NpaError> {
    let n = graph.value(matrix).len();
    Ok(graph.reshape(matrix, vec![n])?)
}
