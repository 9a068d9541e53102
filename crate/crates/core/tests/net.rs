mod common;

use brnpa::autograd::{Graph, Tensor};
use brnpa::data::{generate_shapes, ShapesSpec};
use brnpa::net::{
    aux_isolation_check, distill_resolution_study, distillation_loss, learned_attention_head,
    train, train_on, ExperimentConfig, HeadKind, LearnedAttentionParams, Model, NetError,
    EVAL_EPOCH, RANK_SUBSETS,
};
use brnpa::npa::{extract_representatives, random_volume, FeatureVolume};
use brnpa::parallel::Execution;
use common::{dd_cross_entropy, dd_kl, max_abs_diff};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(head: HeadKind) -> ExperimentConfig {
    ExperimentConfig {
        head,
        epochs: 2,
        dataset: ShapesSpec {
            train: 24,
            test: 9,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn stage_profiles_give_expected_map_sizes() {
    let teacher = ExperimentConfig::default();
    let student = ExperimentConfig {
        strides: vec![2, 2, 1, 1],
        ..Default::default()
    };
    assert_eq!(Model::new(&teacher, false).unwrap().feature_extent(), 4);
    assert_eq!(Model::new(&student, false).unwrap().feature_extent(), 8);
    // same parameter count
    assert_eq!(
        Model::new(&teacher, false).unwrap().params().numel(),
        Model::new(&student, false).unwrap().params().numel()
    );
}

#[test]
fn npa_logits_are_dense_of_concatenated_representatives() {
    let config = tiny(HeadKind::Npa);
    let model = Model::new(&config, false).unwrap();
    let data = generate_shapes(&config.dataset).unwrap();
    let npa = model.sample_npa(EVAL_EPOCH, 0);
    let out = model.forward_one(&data.test[0].image, &npa).unwrap();
    let ex = extract_representatives(&out.volume, &npa).unwrap();
    let z = ex.features.concat();
    let p = model.params();
    let w = p.get(p.find("dense.weight").unwrap());
    let b = p.get(p.find("dense.bias").unwrap());
    let d = z.len();
    let logits: Vec<f64> = (0..3)
        .map(|k| (0..d).map(|j| w.data()[k * d + j] * z[j]).sum::<f64>() + b.data()[k])
        .collect();
    assert!(max_abs_diff(&logits, &out.logits) < 1e-12);
    assert_eq!(out.stack.unwrap().indices(), ex.stack.indices());
}

#[test]
fn learned_attention_identity_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, h, w) = (4, 3, 5);
    let mut data: Vec<f64> = random_volume(&mut rng, c, h, w)
        .data()
        .iter()
        .map(|x| x.abs())
        .collect();
    data[..h * w].fill(1.0);
    let volume = FeatureVolume::new(c, h, w, data).unwrap();
    let mut proj = vec![0.0; c];
    proj[0] = 1.0;
    let params = LearnedAttentionParams {
        conv1: Tensor::zeros(vec![c, c, 3, 3]),
        conv2: Tensor::zeros(vec![c, c, 3, 3]),
        proj: Tensor::new(vec![1, c, 1, 1], proj).unwrap(),
    };
    let (features, stack) = learned_attention_head(&volume, &params).unwrap();
    let hw = h * w;
    let mean: Vec<f64> = (0..c)
        .map(|k| volume.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    assert!(max_abs_diff(features.row(0), &mean) < 1e-12);
    assert!(max_abs_diff(&stack.maps[0].weights, &vec![1.0 / hw as f64; hw]) < 1e-15);
}

fn loss_of(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    labels: &[usize],
    alpha: f64,
) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let s: Vec<_> = student
        .iter()
        .map(|l| g.input(Tensor::vector(l.clone())))
        .collect();
    let t: Vec<_> = teacher
        .iter()
        .map(|l| g.constant(Tensor::vector(l.clone())))
        .collect();
    let terms = distillation_loss(&mut g, &s, &t, labels, alpha).unwrap();
    (g.value(terms.loss).item(), terms.cross_entropy, terms.kl)
}

#[test]
fn distillation_loss_at_alpha_one_is_mean_cross_entropy() {
    let student = vec![vec![0.2, -1.0, 2.5], vec![1.0, 1.0, -3.0]];
    let teacher = vec![vec![3.0, 0.0, 0.0], vec![-1.0, 2.0, 0.5]];
    let labels = [2, 0];
    let (loss, _, _) = loss_of(&student, &teacher, &labels, 1.0);
    let ce = (dd_cross_entropy(&student[0], 2).to_f64()
        + dd_cross_entropy(&student[1], 0).to_f64())
        / 2.0;
    assert!((loss - ce).abs() < 1e-12, "{loss} vs {ce}");
}

#[test]
fn identical_logits_have_zero_kl() {
    let logits = vec![vec![0.7, -0.2, 1.9]];
    let (loss, ce, kl) = loss_of(&logits, &logits, &[1], 0.3);
    assert_eq!(kl, 0.0);
    assert!((loss - 0.3 * ce).abs() < 1e-15);
}

#[test]
fn distillation_hand_case_matches_extended_precision() {
    let s = vec![1.25, -0.5, 0.75];
    let t = vec![-0.25, 2.0, 0.5];
    let alpha = 0.3;
    let (loss, _, _) = loss_of(
        std::slice::from_ref(&s),
        std::slice::from_ref(&t),
        &[2],
        alpha,
    );
    let expect = common::Dd::from(alpha)
        .mul(dd_cross_entropy(&s, 2))
        .add(common::Dd::from(1.0 - alpha).mul(dd_kl(&t, &s)))
        .to_f64();
    assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
}

#[test]
fn distillation_loss_rejects_bad_inputs() {
    let mut g = Graph::new();
    let a = g.input(Tensor::vector(vec![0.0, 1.0]));
    let b = g.constant(Tensor::vector(vec![0.0, 1.0, 2.0]));
    assert!(matches!(
        distillation_loss(&mut g, &[a], &[b], &[0], 0.5),
        Err(NetError::Extent(_))
    ));
    assert!(matches!(
        distillation_loss(&mut g, &[a], &[a], &[0], 1.5),
        Err(NetError::Config { .. })
    ));
    assert!(matches!(
        distillation_loss(&mut g, &[], &[], &[], 0.5),
        Err(NetError::Extent(_))
    ));
}

#[test]
fn teacher_gradient_is_blocked() {
    let mut g = Graph::new();
    let s = g.input(Tensor::vector(vec![0.1, 0.2, 0.3]));
    let t = g.input(Tensor::vector(vec![1.0, -1.0, 0.0]));
    let terms = distillation_loss(&mut g, &[s], &[t], &[0], 0.5).unwrap();
    let grads = g.backward(terms.loss).unwrap();
    assert!(grads.get(t).unwrap().data().iter().all(|x| *x == 0.0));
    assert!(grads.get(s).unwrap().data().iter().any(|x| *x != 0.0));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    for head in [HeadKind::Npa, HeadKind::LearnedAttention, HeadKind::AvgPool] {
        let config = ExperimentConfig {
            learning_rate: 0.0,
            ..tiny(head)
        };
        let before = Model::new(&config, false).unwrap();
        let after = train(&config).unwrap();
        assert_eq!(before.params(), after.model.params(), "{}", head.name());
    }
}

#[test]
fn training_is_reproducible_across_modes() {
    for head in [HeadKind::Npa, HeadKind::LearnedAttention] {
        let seq = ExperimentConfig {
            execution: Execution::Sequential,
            ..tiny(head)
        };
        let par = ExperimentConfig {
            execution: Execution::Parallel,
            ..tiny(head)
        };
        let a = train(&seq).unwrap();
        let b = train(&seq).unwrap();
        let c = train(&par).unwrap();
        assert_eq!(a.log_jsonl(), b.log_jsonl());
        assert_eq!(a.log_jsonl(), c.log_jsonl());
        let bits = |t: &brnpa::net::TrainedModel| {
            t.model
                .params()
                .iter()
                .flat_map(|(_, _, x)| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&c));
    }
}

#[test]
fn different_seeds_train_differently() {
    let a = train(&tiny(HeadKind::Npa)).unwrap();
    let b = train(&ExperimentConfig {
        seed: 1,
        ..tiny(HeadKind::Npa)
    })
    .unwrap();
    assert_ne!(a.model.params(), b.model.params());
}

#[test]
fn auxiliary_heads_do_not_touch_the_backbone() {
    assert!(aux_isolation_check(&tiny(HeadKind::Npa)).unwrap());
}

#[test]
fn rank_head_labels() {
    let labels: Vec<&str> = RANK_SUBSETS.iter().map(|(l, _)| *l).collect();
    assert_eq!(
        labels,
        ["{f1,f2,f3}", "{f1,f2}", "{f2,f3}", "{f1}", "{f2}", "{f3}"]
    );
}

#[test]
fn distill_with_identical_strides_and_unit_alpha_is_plain_training() {
    let teacher = tiny(HeadKind::Npa);
    let student = ExperimentConfig {
        alpha: Some(1.0),
        ..tiny(HeadKind::Npa)
    };
    let (report, t, s) = distill_resolution_study(&teacher, &student).unwrap();
    assert_eq!(
        report.degenerate.as_deref(),
        Some("degenerate: plain training")
    );
    // with α = 1 the KL term carries no weight, so the student retraces the teacher
    assert_eq!(t.model.params(), s.model.params());
    assert_eq!(report.teacher.map_extent, 4);
    assert!(report.teacher.sparsity.is_some());
}

#[test]
fn distill_rejects_finer_teacher() {
    let teacher = ExperimentConfig {
        strides: vec![2, 2, 1, 1],
        ..tiny(HeadKind::Npa)
    };
    let student = ExperimentConfig {
        alpha: Some(0.5),
        ..tiny(HeadKind::Npa)
    };
    assert!(matches!(
        distill_resolution_study(&teacher, &student),
        Err(NetError::Extent(_))
    ));
}

#[test]
fn alpha_without_teacher_is_rejected() {
    let config = ExperimentConfig {
        alpha: Some(0.5),
        ..tiny(HeadKind::Npa)
    };
    let data = generate_shapes(&config.dataset).unwrap();
    let err = train_on(Model::new(&config, false).unwrap(), &data, None).unwrap_err();
    assert!(matches!(err, NetError::Config { field, .. } if field == "alpha"));
}

#[test]
fn teacher_checkpoint_drives_distillation() {
    let dir = tempfile::TempDir::new().unwrap();
    let teacher = train(&tiny(HeadKind::Npa)).unwrap();
    let path = dir.path().join("t.ckpt");
    brnpa::data::save_checkpoint(&path, &teacher.model.checkpoint()).unwrap();
    let student = ExperimentConfig {
        strides: vec![2, 2, 1, 1],
        alpha: Some(0.5),
        teacher_checkpoint: Some(path),
        ..tiny(HeadKind::Npa)
    };
    let s = train(&student).unwrap();
    assert!(s
        .log
        .iter()
        .all(|r| r.loss_kl.is_finite() && r.loss_kl >= 0.0));
    assert!(s.log.iter().any(|r| r.loss_kl > 0.0));
}

#[test]
fn pinned_training_config_learns_the_task() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/train.toml");
    let config = ExperimentConfig::from_toml_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let active = train(&config).unwrap();
    assert!(active.test_accuracy() >= 0.90, "{}", active.test_accuracy());
    assert!(active.log.iter().all(|r| r.loss_ce.is_finite()));
    let mut plain = config.clone();
    plain.npa.selection = brnpa::npa::SelectionMode::Random;
    plain.npa.refine = false;
    let random = train(&plain).unwrap();
    assert!(random.test_accuracy() < active.test_accuracy());
}
