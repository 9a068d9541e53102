use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Sgd, Tensor};
use crate::data::{generate_shapes, load_checkpoint, Sample, ShapesDataset};
use crate::metrics::{foreground_mass, sparsity};
use crate::npa::NpaConfig;
use crate::parallel::{self, Execution};

use super::loss::distillation_loss;
use super::model::{argmax, Model, EVAL_EPOCH};
use super::{ExperimentConfig, NetError};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    /// Mean per-step gradient norm of each parameter group, in the order of
    /// [`TrainedModel::grad_groups`].
    pub grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Accuracy of each auxiliary rank-subset head.
    pub aux_accuracy: Vec<f64>,
    /// Mean sparsity over samples whose attention is not degenerate.
    pub sparsity: Option<f64>,
    pub degenerate_maps: usize,
    /// Mean share of norm-weighted attention falling on the shape.
    pub foreground_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub grad_groups: Vec<String>,
    /// Variance of each group's per-step gradient norm over the whole run.
    pub grad_norm_variance: Vec<f64>,
    pub steps: u64,
    pub test: EvalResult,
}

impl TrainedModel {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn test_accuracy(&self) -> f64 {
        self.test.accuracy
    }
}

enum StepFailure {
    /// Names the first non-finite tensor.
    NonFinite(String),
    Error(NetError),
}

impl From<NetError> for StepFailure {
    fn from(e: NetError) -> Self {
        StepFailure::Error(e)
    }
}

impl From<crate::autograd::AutogradError> for StepFailure {
    fn from(e: crate::autograd::AutogradError) -> Self {
        StepFailure::Error(e.into())
    }
}

struct SampleStep {
    grads: Vec<Tensor>,
    cross_entropy: f64,
    kl: f64,
    correct: bool,
}

fn sample_step(
    model: &Model,
    sample: &Sample,
    teacher: Option<(&[f64], f64)>,
    npa: &NpaConfig,
) -> Result<SampleStep, StepFailure> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let x = g.constant(sample.image.clone());
    let trace = model.trace(&mut g, &vars, x, npa)?;
    let correct = argmax(g.value(trace.logits).data()) == sample.label;
    let (mut loss, ce, kl) = match teacher {
        Some((logits, alpha)) => {
            let t = g.constant(Tensor::vector(logits.to_vec()));
            let terms = distillation_loss(&mut g, &[trace.logits], &[t], &[sample.label], alpha)?;
            (terms.loss, terms.cross_entropy, terms.kl)
        }
        None => {
            let ce = g.cross_entropy(trace.logits, sample.label)?;
            let v = g.value(ce).item();
            (ce, v, 0.0)
        }
    };
    for aux in &trace.aux_logits {
        let ce = g.cross_entropy(*aux, sample.label)?;
        loss = g.add(loss, ce)?;
    }
    if !g.value(loss).all_finite() {
        let (var, op) = g.first_non_finite().expect("loss is non-finite");
        return Err(StepFailure::NonFinite(format!(
            "{op} (node {})",
            var.index()
        )));
    }
    let record = g.backward(loss)?;
    let grads: Vec<Tensor> = record
        .into_param_grads()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    for (i, t) in grads.iter().enumerate() {
        if !t.all_finite() {
            let id = crate::autograd::ParamId(i);
            return Err(StepFailure::NonFinite(format!(
                "gradient of {}",
                model.params().name(id)
            )));
        }
    }
    Ok(SampleStep {
        grads,
        cross_entropy: ce,
        kl,
        correct,
    })
}

/// Test-set evaluation with per-sample evaluation seeds.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    exec: Execution,
) -> Result<EvalResult, NetError> {
    struct One {
        correct: bool,
        aux: Vec<bool>,
        sparsity: Option<f64>,
        mass: Option<f64>,
    }
    let size = model.config().dataset.size;
    let rows = parallel::map(exec, samples, |i, s| -> Result<One, NetError> {
        let out = model.forward_one(&s.image, &model.sample_npa(EVAL_EPOCH, i as u64))?;
        let (sp, mass) = match &out.stack {
            Some(stack) => (
                sparsity(stack, &out.volume).ok().map(|r| r.s),
                foreground_mass(stack, &out.volume, &s.mask, size).ok(),
            ),
            None => (None, None),
        };
        Ok(One {
            correct: out.prediction() == s.label,
            aux: out
                .aux_logits
                .iter()
                .map(|l| argmax(l) == s.label)
                .collect(),
            sparsity: sp,
            mass,
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = rows.len().max(1) as f64;
    let heads = rows.first().map_or(0, |r| r.aux.len());
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let with_stack = model.config().head != super::HeadKind::AvgPool;
    let sparsities: Vec<f64> = rows.iter().filter_map(|r| r.sparsity).collect();
    Ok(EvalResult {
        accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n,
        aux_accuracy: (0..heads)
            .map(|k| rows.iter().filter(|r| r.aux[k]).count() as f64 / n)
            .collect(),
        degenerate_maps: if with_stack {
            rows.len() - sparsities.len()
        } else {
            0
        },
        sparsity: mean(sparsities),
        foreground_mass: mean(rows.iter().filter_map(|r| r.mass).collect()),
    })
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<Model, NetError> {
    let ckpt = load_checkpoint(path)?;
    Model::from_checkpoint(&ckpt)
}

/// Generates the dataset, loads the teacher named by the config (if any)
/// and trains a fresh model.
pub fn train(config: &ExperimentConfig) -> Result<TrainedModel, NetError> {
    config.validate()?;
    config.check_teacher(config.teacher_checkpoint.is_some())?;
    let dataset = generate_shapes(&config.dataset)?;
    let teacher = match &config.teacher_checkpoint {
        Some(path) => Some(load_teacher(path)?),
        None => None,
    };
    let model = Model::new(config, false)?;
    train_on(model, &dataset, teacher.as_ref())
}

/// Seeded minibatch SGD on `dataset.train`, evaluating on `dataset.test`
/// after every epoch. With a teacher, the loss is the distillation loss with
/// the config's `alpha`; auxiliary heads on `model` add their
/// cross-entropies to the loss.
///
/// Per-sample forward/backward passes of a batch run through
/// [`parallel::map`]; gradients are summed in batch order, so every
/// execution mode gives bit-identical results.
pub fn train_on(
    mut model: Model,
    dataset: &ShapesDataset,
    teacher: Option<&Model>,
) -> Result<TrainedModel, NetError> {
    let config = model.config().clone();
    let exec = config.execution;
    config.check_teacher(teacher.is_some())?;
    let alpha = config.alpha;
    if dataset.spec.size != config.dataset.size {
        return Err(NetError::Extent(format!(
            "dataset images are {} px, model expects {}",
            dataset.spec.size, config.dataset.size
        )));
    }
    let teacher_logits: Option<Vec<Vec<f64>>> = match teacher {
        Some(t) => {
            if t.config().dataset.size != config.dataset.size {
                return Err(NetError::Extent(format!(
                    "teacher expects {} px images, student {}",
                    t.config().dataset.size,
                    config.dataset.size
                )));
            }
            let images: Vec<Tensor> = dataset.train.iter().map(|s| s.image.clone()).collect();
            Some(
                t.forward(&images, exec)?
                    .into_iter()
                    .map(|o| o.logits)
                    .collect(),
            )
        }
        None => None,
    };

    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    let mut groups: Vec<String> = Vec::new();
    let group_of: Vec<usize> = ids
        .iter()
        .map(|id| {
            let g = model.param_group(*id).to_string();
            match groups.iter().position(|x| *x == g) {
                Some(i) => i,
                None => {
                    groups.push(g);
                    groups.len() - 1
                }
            }
        })
        .collect();

    let mut sgd = Sgd::new(model.params(), config.learning_rate, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(5);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut all_norms: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    let mut test = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut correct, mut ce_sum, mut kl_sum) = (0usize, 0.0, 0.0);
        let mut epoch_norms = vec![0.0; groups.len()];
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let results = parallel::map(exec, batch, |_, &idx| {
                let t = teacher_logits
                    .as_ref()
                    .map(|l| (l[idx].as_slice(), alpha.expect("alpha with teacher")));
                sample_step(
                    &model,
                    &dataset.train[idx],
                    t,
                    &model.sample_npa(epoch as u64, idx as u64),
                )
            });
            let mut acc = model.params().zeros_like();
            for r in results {
                let r = r.map_err(|f| match f {
                    StepFailure::NonFinite(tensor) => NetError::Divergence {
                        epoch,
                        step,
                        tensor,
                    },
                    StepFailure::Error(e) => e,
                })?;
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    a.add_assign(g);
                }
                correct += r.correct as usize;
                ce_sum += r.cross_entropy;
                kl_sum += r.kl;
            }
            let inv = 1.0 / batch.len() as f64;
            for a in acc.iter_mut() {
                a.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let mut sq = vec![0.0; groups.len()];
            for (i, a) in acc.iter().enumerate() {
                sq[group_of[i]] += a.data().iter().map(|v| v * v).sum::<f64>();
            }
            for (k, s) in sq.iter().enumerate() {
                let norm = s.sqrt();
                epoch_norms[k] += norm / batches.len() as f64;
                all_norms[k].push(norm);
            }
            sgd.step(model.params_mut(), &acc)?;
        }
        let n = dataset.train.len() as f64;
        let eval = evaluate(&model, &dataset.test, exec)?;
        log.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / n,
            test_acc: eval.accuracy,
            loss_ce: ce_sum / n,
            loss_kl: kl_sum / n,
            grad_norms: epoch_norms,
        });
        test = Some(eval);
    }
    let test = match test {
        Some(t) => t,
        None => evaluate(&model, &dataset.test, exec)?,
    };
    let grad_norm_variance = all_norms
        .iter()
        .map(|v| {
            if v.is_empty() {
                return 0.0;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(TrainedModel {
        model,
        log,
        grad_groups: groups,
        grad_norm_variance,
        steps: sgd.steps(),
        test,
    })
}
