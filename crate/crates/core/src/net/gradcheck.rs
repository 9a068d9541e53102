use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::fd::{relative_error, DEFAULT_STEP};
use crate::autograd::{Graph, Params, Tensor};
use crate::data::ShapesSpec;
use crate::npa::NpaConfig;

use super::config::{ExperimentConfig, HeadKind};
use super::loss::distillation_loss;
use super::model::Model;
use super::NetError;

/// Finite-difference check of the full toy network (conv stages, head,
/// dense layer and the distillation loss with α = 0.5).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NetworkGradcheck {
    pub head: String,
    pub attempted: usize,
    pub evaluated: usize,
    /// A probe moved some ReLU input across zero.
    pub excluded_relu_kink: usize,
    /// A probe changed an anchor choice.
    pub excluded_selection_flip: usize,
    /// A probe moved a similarity across the clamp floor.
    pub excluded_clamp_kink: usize,
    pub max_relative_error: f64,
    pub errors: Vec<f64>,
}

/// Piecewise-smooth region a forward pass lies in.
#[derive(PartialEq)]
struct Signature {
    relu: Vec<bool>,
    anchors: Vec<usize>,
    support: Vec<bool>,
}

fn small_config(head: HeadKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        head,
        npa: NpaConfig::default(),
        strides: vec![2, 1, 2, 1],
        channels: vec![4, 4, 6, 6],
        dataset: ShapesSpec {
            size: 12,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Case<'a> {
    model: &'a Model,
    image: &'a Tensor,
    teacher: &'a [f64],
    label: usize,
}

impl Case<'_> {
    fn loss(
        &self,
        params: &Params,
        frozen: bool,
    ) -> Result<(f64, Signature, Option<Vec<f64>>), NetError> {
        let mut g = Graph::new();
        let vars = if frozen {
            params.bind_frozen(&mut g)
        } else {
            params.bind(&mut g)
        };
        let x = g.constant(self.image.clone());
        let trace = self
            .model
            .trace(&mut g, &vars, x, &self.model.config().npa)?;
        let t = g.constant(Tensor::vector(self.teacher.to_vec()));
        let terms = distillation_loss(&mut g, &[trace.logits], &[t], &[self.label], 0.5)?;
        let value = g.value(terms.loss).item();
        let sig = Signature {
            relu: g.relu_pattern(),
            anchors: trace
                .stack
                .as_ref()
                .map(|s| s.indices())
                .unwrap_or_default(),
            support: trace
                .stack
                .as_ref()
                .map(|s| {
                    s.maps
                        .iter()
                        .flat_map(|m| m.weights.iter().map(|w| *w > 0.0))
                        .collect()
                })
                .unwrap_or_default(),
        };
        let grads = if frozen {
            None
        } else {
            let record = g.backward(terms.loss)?;
            Some(
                record
                    .into_param_grads()
                    .into_iter()
                    .flat_map(|(_, t)| t.into_data())
                    .collect(),
            )
        };
        Ok((value, sig, grads))
    }
}

/// Checks analytic parameter gradients of a small randomly initialized
/// network against central differences, two random coordinates per
/// parameter tensor. Runs until `trials` cases have been evaluated (or
/// `4·trials` attempts). A case is skipped and counted when any probe lands
/// on a different linear piece than the base point.
pub fn network_gradcheck(
    head: HeadKind,
    trials: usize,
    seed: u64,
) -> Result<NetworkGradcheck, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = NetworkGradcheck {
        head: head.name().into(),
        ..Default::default()
    };
    while report.evaluated < trials && report.attempted < 4 * trials {
        report.attempted += 1;
        let model = Model::new(&small_config(head, rng.random()), false)?;
        let size = model.config().dataset.size;
        let image = Tensor::new(
            vec![1, size, size],
            (0..size * size).map(|_| rng.random::<f64>()).collect(),
        )?;
        let teacher: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let case = Case {
            model: &model,
            image: &image,
            teacher: &teacher,
            label: rng.random_range(0..3),
        };
        let (_, base_sig, analytic) = case.loss(model.params(), false)?;
        let analytic = analytic.expect("gradients requested");

        let mut offsets = Vec::new();
        let mut start = 0;
        for (_, _, t) in model.params().iter() {
            for _ in 0..2 {
                offsets.push(start + rng.random_range(0..t.len()));
            }
            start += t.len();
        }

        let mut params = model.params().clone();
        let mut numeric = Vec::with_capacity(offsets.len());
        let mut flip = None;
        for &flat in &offsets {
            let (id, j) = locate(&params, flat);
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + DEFAULT_STEP;
            let (up, sig_up, _) = case.loss(&params, true)?;
            params.get_mut(id).data_mut()[j] = orig - DEFAULT_STEP;
            let (down, sig_down, _) = case.loss(&params, true)?;
            params.get_mut(id).data_mut()[j] = orig;
            for sig in [&sig_up, &sig_down] {
                if flip.is_none() && *sig != base_sig {
                    flip = Some(if sig.relu != base_sig.relu {
                        0
                    } else if sig.anchors != base_sig.anchors {
                        1
                    } else {
                        2
                    });
                }
            }
            numeric.push((up - down) / (2.0 * DEFAULT_STEP));
        }
        match flip {
            Some(0) => report.excluded_relu_kink += 1,
            Some(1) => report.excluded_selection_flip += 1,
            Some(_) => report.excluded_clamp_kink += 1,
            None => {
                let a: Vec<f64> = offsets.iter().map(|&k| analytic[k]).collect();
                let err = relative_error(&a, &numeric);
                report.max_relative_error = report.max_relative_error.max(err);
                report.errors.push(err);
                report.evaluated += 1;
            }
        }
    }
    Ok(report)
}

fn locate(params: &Params, mut flat: usize) -> (crate::autograd::ParamId, usize) {
    for (id, _, t) in params.iter() {
        if flat < t.len() {
            return (id, flat);
        }
        flat -= t.len();
    }
    unreachable!("offset inside the parameter vector")
}
