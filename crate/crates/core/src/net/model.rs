use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Axis, Graph, ParamId, Params, ReduceKind, Tensor, Var};
use crate::data::{Checkpoint, ShapeKind};
use crate::npa::{
    concat_representatives, npa_forward, AttentionStack, FeatureMatrix, FeatureVolume, NpaConfig,
};
use crate::parallel::{self, Execution};

use super::config::{ExperimentConfig, HeadKind, PADDING};
use super::NetError;

/// Representative subsets read by the rank-head suite; the first entry is
/// the main head.
pub const RANK_SUBSETS: [(&str, &[usize]); 6] = [
    ("{f1,f2,f3}", &[0, 1, 2]),
    ("{f1,f2}", &[0, 1]),
    ("{f2,f3}", &[1, 2]),
    ("{f1}", &[0]),
    ("{f2}", &[1]),
    ("{f3}", &[2]),
];

/// Epoch tag used for per-sample seeds outside training.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stages: Vec<ParamId>,
    attention: Option<[ParamId; 3]>,
    dense: (ParamId, ParamId),
    aux: Vec<(ParamId, ParamId)>,
}

/// Convolutional classifier: plain conv+ReLU stages, then one of three
/// heads, then a dense layer. Optionally carries the five auxiliary
/// rank-subset heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ExperimentConfig,
    params: Params,
    layout: Layout,
}

/// Everything a single forward pass produces, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub logits: Vec<f64>,
    pub aux_logits: Vec<Vec<f64>>,
    pub stack: Option<AttentionStack>,
    pub volume: FeatureVolume,
}

impl SampleOutput {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) struct Trace {
    pub logits: Var,
    pub aux_logits: Vec<Var>,
    pub volume: Var,
    pub stack: Option<AttentionStack>,
}

/// Parameters of the learned-attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedAttentionParams {
    /// `C×C×3×3`.
    pub conv1: Tensor,
    /// `C×C×3×3`.
    pub conv2: Tensor,
    /// `N×C×1×1`.
    pub proj: Tensor,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn dense_layer(g: &mut Graph, weight: Var, bias: Var, z: Var) -> Result<Var, NetError> {
    let d = g.value(z).len();
    let col = g.reshape(z, vec![d, 1])?;
    let y = g.matmul(weight, col)?;
    let k = g.value(y).len();
    let y = g.reshape(y, vec![k])?;
    Ok(g.add(y, bias)?)
}

/// Records the learned-attention head on a `C×H×W` node: a residual block
/// of two 3×3 convolutions, a 1×1 projection to `N` maps and a ReLU. Each
/// output row `k` is the spatial average of `map_k ⊙ volume`. The returned
/// stack holds the maps rescaled to sum 1 (all-zero maps stay zero).
pub(crate) fn learned_attention(
    g: &mut Graph,
    volume: Var,
    conv1: Var,
    conv2: Var,
    proj: Var,
) -> Result<(Var, AttentionStack), NetError> {
    let shape = g.value(volume).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let x = g.conv2d(volume, conv1, 1, PADDING)?;
    let x = g.relu(x)?;
    let x = g.conv2d(x, conv2, 1, PADDING)?;
    let x = g.add(x, volume)?;
    let x = g.relu(x)?;
    let maps = g.conv2d(x, proj, 1, 0)?;
    let maps = g.relu(maps)?;
    let n = g.value(maps).shape()[0];
    let maps = g.reshape(maps, vec![n, hw])?;
    let flat = g.reshape(volume, vec![c, hw])?;
    let flat_t = g.transpose(flat)?;
    let pooled = g.matmul(maps, flat_t)?;
    let pooled = g.scale(pooled, 1.0 / hw as f64)?;

    let raw = g.value(maps).data();
    let normalized = (0..n)
        .map(|k| {
            let row = &raw[k * hw..(k + 1) * hw];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|v| v / total).collect()
            } else {
                vec![0.0; hw]
            }
        })
        .collect();
    let stack = AttentionStack::from_weights(h, w, normalized)?;
    Ok((pooled, stack))
}

/// Learned-attention head on a plain volume: returns the `N×C` pooled
/// features and the normalized maps.
pub fn learned_attention_head(
    volume: &FeatureVolume,
    params: &LearnedAttentionParams,
) -> Result<(FeatureMatrix, AttentionStack), NetError> {
    let mut g = Graph::new();
    let v = g.constant(volume.to_tensor());
    let c1 = g.constant(params.conv1.clone());
    let c2 = g.constant(params.conv2.clone());
    let p = g.constant(params.proj.clone());
    let (pooled, stack) = learned_attention(&mut g, v, c1, c2, p)?;
    let t = g.value(pooled);
    Ok((
        FeatureMatrix {
            rows: t.shape()[0],
            cols: t.shape()[1],
            data: t.data().to_vec(),
        },
        stack,
    ))
}

impl Model {
    /// Freshly initialized model (He-normal weights, zero biases) seeded
    /// from `config.seed`. Auxiliary heads draw their weights after the main
    /// model, so attaching them leaves every other initial value unchanged.
    pub fn new(config: &ExperimentConfig, aux_heads: bool) -> Result<Self, NetError> {
        config.validate()?;
        if aux_heads && (config.head != HeadKind::Npa || config.npa.n != 3) {
            return Err(NetError::Config {
                field: "npa.n".into(),
                reason: "rank heads need the npa head with n = 3".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        let mut params = Params::new();
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            params.insert(
                format!("stage{i}.weight"),
                gaussian(
                    &mut rng,
                    vec![cout, cin, 3, 3],
                    (2.0 / (cin * 9) as f64).sqrt(),
                ),
            );
            cin = cout;
        }
        let c = config.feature_channels();
        let n = config.npa.n;
        if config.head == HeadKind::LearnedAttention {
            params.insert(
                "attention.conv1",
                gaussian(&mut rng, vec![c, c, 3, 3], (2.0 / (c * 9) as f64).sqrt()),
            );
            params.insert(
                "attention.conv2",
                gaussian(&mut rng, vec![c, c, 3, 3], (2.0 / (c * 9) as f64).sqrt()),
            );
            params.insert(
                "attention.proj",
                gaussian(&mut rng, vec![n, c, 1, 1], (2.0 / c as f64).sqrt()),
            );
        }
        let classes = ShapeKind::ALL.len();
        let d = match config.head {
            HeadKind::AvgPool => c,
            _ => n * c,
        };
        params.insert(
            "dense.weight",
            gaussian(&mut rng, vec![classes, d], (1.0 / d as f64).sqrt()),
        );
        params.insert("dense.bias", Tensor::zeros(vec![classes]));
        if aux_heads {
            for (k, (_, subset)) in RANK_SUBSETS.iter().enumerate().skip(1) {
                let d = subset.len() * c;
                params.insert(
                    format!("aux{k}.weight"),
                    gaussian(&mut rng, vec![classes, d], (1.0 / d as f64).sqrt()),
                );
                params.insert(format!("aux{k}.bias"), Tensor::zeros(vec![classes]));
            }
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// architecture `config` describes.
    pub fn from_params(config: &ExperimentConfig, params: Params) -> Result<Self, NetError> {
        config.validate()?;
        let aux = params.find("aux1.weight").is_some();
        let mut expected = Self::expected_shapes(config, aux);
        if expected.len() != params.len() {
            return Err(NetError::Layout(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut find = |name: &str| -> Result<ParamId, NetError> {
            let id = params
                .find(name)
                .ok_or_else(|| NetError::Layout(format!("missing parameter {name}")))?;
            let shape = expected.remove(name).expect("expected name");
            if params.get(id).shape() != shape.as_slice() {
                return Err(NetError::Layout(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let stages = (0..config.strides.len())
            .map(|i| find(&format!("stage{i}.weight")))
            .collect::<Result<_, _>>()?;
        let attention = if config.head == HeadKind::LearnedAttention {
            Some([
                find("attention.conv1")?,
                find("attention.conv2")?,
                find("attention.proj")?,
            ])
        } else {
            None
        };
        let dense = (find("dense.weight")?, find("dense.bias")?);
        let aux = if aux {
            (1..RANK_SUBSETS.len())
                .map(|k| {
                    Ok((
                        find(&format!("aux{k}.weight"))?,
                        find(&format!("aux{k}.bias"))?,
                    ))
                })
                .collect::<Result<_, NetError>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config: config.clone(),
            params,
            layout: Layout {
                stages,
                attention,
                dense,
                aux,
            },
        })
    }

    fn expected_shapes(
        config: &ExperimentConfig,
        aux: bool,
    ) -> std::collections::BTreeMap<String, Vec<usize>> {
        let mut out = std::collections::BTreeMap::new();
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            out.insert(format!("stage{i}.weight"), vec![cout, cin, 3, 3]);
            cin = cout;
        }
        let c = config.feature_channels();
        let n = config.npa.n;
        if config.head == HeadKind::LearnedAttention {
            out.insert("attention.conv1".into(), vec![c, c, 3, 3]);
            out.insert("attention.conv2".into(), vec![c, c, 3, 3]);
            out.insert("attention.proj".into(), vec![n, c, 1, 1]);
        }
        let classes = ShapeKind::ALL.len();
        let d = if config.head == HeadKind::AvgPool {
            c
        } else {
            n * c
        };
        out.insert("dense.weight".into(), vec![classes, d]);
        out.insert("dense.bias".into(), vec![classes]);
        if aux {
            for (k, (_, subset)) in RANK_SUBSETS.iter().enumerate().skip(1) {
                out.insert(format!("aux{k}.weight"), vec![classes, subset.len() * c]);
                out.insert(format!("aux{k}.bias"), vec![classes]);
            }
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let config = ExperimentConfig::from_json_str(&ckpt.config)?;
        Self::from_params(&config, ckpt.params.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_json(),
            params: self.params.clone(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn has_aux_heads(&self) -> bool {
        !self.layout.aux.is_empty()
    }

    /// Whether `id` belongs to an auxiliary rank-subset head.
    pub fn is_aux_param(&self, id: ParamId) -> bool {
        self.layout.aux.iter().any(|(w, b)| *w == id || *b == id)
    }

    /// Spatial extent of the final feature volume.
    pub fn feature_extent(&self) -> usize {
        self.config.feature_extent().expect("validated")
    }

    /// Parameter group used for gradient-norm logging: the text before the
    /// first dot of the name (`stage0`, `attention`, `dense`, `aux3`).
    pub fn param_group(&self, id: ParamId) -> &str {
        let name = self.params.name(id);
        name.split('.').next().unwrap_or(name)
    }

    /// Extraction settings for one sample; only random selection depends on
    /// the derived seed.
    pub fn sample_npa(&self, epoch: u64, index: u64) -> NpaConfig {
        let seed = splitmix(self.config.npa.seed ^ splitmix(epoch ^ splitmix(index)));
        self.config.npa.clone().with_seed(seed)
    }

    pub(crate) fn trace(
        &self,
        g: &mut Graph,
        vars: &[Var],
        image: Var,
        npa: &NpaConfig,
    ) -> Result<Trace, NetError> {
        let size = self.config.dataset.size;
        let shape = g.value(image).shape().to_vec();
        if shape != [1, size, size] {
            return Err(NetError::InputShape {
                expected: vec![1, size, size],
                actual: shape,
            });
        }
        let mut x = image;
        for (i, id) in self.layout.stages.iter().enumerate() {
            x = g.conv2d(x, vars[id.0], self.config.strides[i], PADDING)?;
            x = g.relu(x)?;
        }
        let volume = x;
        let (features, matrix, stack) = match self.config.head {
            HeadKind::Npa => {
                let (matrix, extraction) = npa_forward(g, volume, npa)?;
                let z = concat_representatives(g, matrix)?;
                (z, Some(matrix), Some(extraction.stack))
            }
            HeadKind::LearnedAttention => {
                let [c1, c2, p] = self.layout.attention.expect("attention params");
                let (matrix, stack) =
                    learned_attention(g, volume, vars[c1.0], vars[c2.0], vars[p.0])?;
                let n = g.value(matrix).len();
                let z = g.reshape(matrix, vec![n])?;
                (z, Some(matrix), Some(stack))
            }
            HeadKind::AvgPool => {
                let c = g.value(volume).shape()[0];
                let flat = g.reshape(volume, vec![c, g.value(volume).len() / c])?;
                let z = g.reduce(ReduceKind::Mean, flat, Axis::Dim(1))?;
                (z, None, None)
            }
        };
        let (w, b) = self.layout.dense;
        let logits = dense_layer(g, vars[w.0], vars[b.0], features)?;
        let mut aux_logits = Vec::with_capacity(self.layout.aux.len());
        if let Some(matrix) = matrix {
            for ((_, subset), (w, b)) in RANK_SUBSETS.iter().skip(1).zip(&self.layout.aux) {
                let rows = g.select_rows(matrix, subset)?;
                let rows = g.stop_gradient(rows)?;
                let z = g.concat(&[rows])?;
                aux_logits.push(dense_layer(g, vars[w.0], vars[b.0], z)?);
            }
        }
        Ok(Trace {
            logits,
            aux_logits,
            volume,
            stack,
        })
    }

    /// Inference on one `1×S×S` image with the given extraction settings.
    pub fn forward_one(&self, image: &Tensor, npa: &NpaConfig) -> Result<SampleOutput, NetError> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let t = self.trace(&mut g, &vars, x, npa)?;
        Ok(SampleOutput {
            logits: g.value(t.logits).data().to_vec(),
            aux_logits: t
                .aux_logits
                .iter()
                .map(|v| g.value(*v).data().to_vec())
                .collect(),
            stack: t.stack,
            volume: FeatureVolume::from_tensor(g.value(t.volume))?,
        })
    }

    /// Inference on a batch; sample `i` uses the evaluation seed for index
    /// `i`. Output order follows input order.
    pub fn forward(
        &self,
        images: &[Tensor],
        exec: Execution,
    ) -> Result<Vec<SampleOutput>, NetError> {
        parallel::map(exec, images, |i, image| {
            self.forward_one(image, &self.sample_npa(EVAL_EPOCH, i as u64))
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(head: HeadKind) -> ExperimentConfig {
        ExperimentConfig {
            head,
            ..Default::default()
        }
    }

    fn image(v: f64) -> Tensor {
        Tensor::full(vec![1, 32, 32], v)
    }

    #[test]
    fn avg_pool_zero_weights_gives_bias() {
        let mut m = Model::new(&small(HeadKind::AvgPool), false).unwrap();
        let w = m.params.find("dense.weight").unwrap();
        let b = m.params.find("dense.bias").unwrap();
        m.params.get_mut(w).data_mut().fill(0.0);
        m.params
            .get_mut(b)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = m.forward_one(&image(0.3), &NpaConfig::default()).unwrap();
        assert_eq!(out.logits, vec![0.5, -1.0, 2.0]);
        assert!(out.stack.is_none());
    }

    #[test]
    fn identical_images_identical_logits() {
        for head in [HeadKind::Npa, HeadKind::LearnedAttention, HeadKind::AvgPool] {
            let m = Model::new(&small(head), false).unwrap();
            let out = m
                .forward(&[image(0.4), image(0.4)], Execution::Parallel)
                .unwrap();
            assert_eq!(out[0].logits, out[1].logits);
            assert_eq!(out[0].volume.height(), 4);
        }
    }

    #[test]
    fn wrong_input_shape() {
        let m = Model::new(&small(HeadKind::Npa), false).unwrap();
        let err = m.forward_one(&Tensor::zeros(vec![1, 16, 16]), &NpaConfig::default());
        assert!(matches!(err, Err(NetError::InputShape { .. })));
    }

    #[test]
    fn aux_heads_leave_main_init_unchanged() {
        let cfg = small(HeadKind::Npa);
        let plain = Model::new(&cfg, false).unwrap();
        let aux = Model::new(&cfg, true).unwrap();
        for (id, name, t) in plain.params.iter() {
            assert_eq!(aux.params.get(id), t, "{name}");
        }
        assert_eq!(aux.params.len(), plain.params.len() + 10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(&small(HeadKind::LearnedAttention), false).unwrap();
        let back = Model::from_checkpoint(&m.checkpoint()).unwrap();
        assert_eq!(back, m);
        let other = Model::from_params(&small(HeadKind::Npa), m.params.clone());
        assert!(matches!(other, Err(NetError::Layout(_))));
    }

    #[test]
    fn zero_attention_weights_zero_features() {
        let c = 4;
        let params = LearnedAttentionParams {
            conv1: Tensor::zeros(vec![c, c, 3, 3]),
            conv2: Tensor::zeros(vec![c, c, 3, 3]),
            proj: Tensor::zeros(vec![3, c, 1, 1]),
        };
        let vol = FeatureVolume::new(c, 2, 2, (0..16).map(|v| v as f64).collect()).unwrap();
        let (f, stack) = learned_attention_head(&vol, &params).unwrap();
        assert!(f.data.iter().all(|v| *v == 0.0));
        assert!(stack
            .maps
            .iter()
            .all(|m| m.weights.iter().all(|w| *w == 0.0)));
    }
}
