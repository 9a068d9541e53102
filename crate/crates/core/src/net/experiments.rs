use serde::Serialize;

use crate::data::{generate_shapes, ShapesSpec};
use crate::npa::SelectionMode;
use crate::parallel;

use super::config::{ExperimentConfig, HeadKind};
use super::model::{Model, RANK_SUBSETS};
use super::train::{train_on, TrainedModel};
use super::NetError;

/// Required lead of active+refine over random+no-refine.
pub const ABLATION_MARGIN: f64 = 0.10;
/// Largest accuracy drop of the distilled student below its teacher.
pub const DISTILL_TOLERANCE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn at_least(name: &str, lhs: (&str, f64), rhs: (&str, f64), margin: f64) -> Self {
        let passed = lhs.1 >= rhs.1 + margin;
        let detail = if margin == 0.0 {
            format!("{} = {:.4} ≥ {} = {:.4}", lhs.0, lhs.1, rhs.0, rhs.1)
        } else {
            format!(
                "{} = {:.4} ≥ {} = {:.4} {:+.2}",
                lhs.0, lhs.1, rhs.0, rhs.1, margin
            )
        };
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn all_passed(assertions: &[Assertion]) -> bool {
    assertions.iter().all(|a| a.passed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `Selection/Refinement`, e.g. `Active/Yes`.
    pub label: String,
    pub selection: SelectionMode,
    pub refine: bool,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub assertions: Vec<Assertion>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        all_passed(&self.assertions)
    }

    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.test_acc)
    }
}

/// Trains the four selection × refinement variants of `base` (npa head)
/// with identical seeds, data and budget. Variants are independent and run
/// through [`parallel::map`].
pub fn run_ablation_grid(base: &ExperimentConfig) -> Result<AblationReport, NetError> {
    let mut base = base.clone();
    base.head = HeadKind::Npa;
    base.validate()?;
    let dataset = generate_shapes(&base.dataset)?;
    let variants = [
        (SelectionMode::Random, false, "Random/No"),
        (SelectionMode::Random, true, "Random/Yes"),
        (SelectionMode::Active, false, "Active/No"),
        (SelectionMode::Active, true, "Active/Yes"),
    ];
    let trained = parallel::map(base.execution, &variants, |_, (selection, refine, _)| {
        let mut cfg = base.clone();
        cfg.npa.selection = *selection;
        cfg.npa.refine = *refine;
        train_on(Model::new(&cfg, false)?, &dataset, None)
    });
    let mut rows = Vec::with_capacity(4);
    for ((selection, refine, label), t) in variants.iter().zip(trained) {
        let t = t?;
        rows.push(AblationRow {
            label: label.to_string(),
            selection: *selection,
            refine: *refine,
            train_acc: t.log.last().map_or(0.0, |r| r.train_acc),
            test_acc: t.test_accuracy(),
        });
    }
    let best = ("Active/Yes", rows[3].test_acc);
    let mut assertions: Vec<Assertion> = rows[..3]
        .iter()
        .map(|r| {
            Assertion::at_least(
                "active+refine ranks first",
                best,
                (&r.label, r.test_acc),
                0.0,
            )
        })
        .collect();
    assertions.push(Assertion::at_least(
        "active+refine leads random+no-refine",
        best,
        ("Random/No", rows[0].test_acc),
        ABLATION_MARGIN,
    ));
    Ok(AblationReport { rows, assertions })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankHeadRow {
    pub label: String,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankHeadReport {
    pub rows: Vec<RankHeadRow>,
    pub assertions: Vec<Assertion>,
}

impl RankHeadReport {
    pub fn passed(&self) -> bool {
        all_passed(&self.assertions)
    }

    pub fn accuracy(&self, label: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.test_acc)
    }
}

/// Trains the npa model together with the five auxiliary subset heads
/// (each reading its representatives through a stop-gradient) on the sum of
/// the six cross-entropies, then reports every head's test accuracy.
pub fn run_rank_head_experiment(
    config: &ExperimentConfig,
) -> Result<(RankHeadReport, TrainedModel), NetError> {
    let dataset = generate_shapes(&config.dataset)?;
    let trained = train_on(Model::new(config, true)?, &dataset, None)?;
    let mut rows = vec![RankHeadRow {
        label: RANK_SUBSETS[0].0.into(),
        test_acc: trained.test.accuracy,
    }];
    for ((label, _), acc) in RANK_SUBSETS.iter().skip(1).zip(&trained.test.aux_accuracy) {
        rows.push(RankHeadRow {
            label: label.to_string(),
            test_acc: *acc,
        });
    }
    let get = |label: &'static str| {
        (
            label,
            rows.iter()
                .find(|r| r.label == label)
                .map_or(0.0, |r| r.test_acc),
        )
    };
    let assertions = vec![
        Assertion::at_least("rank order f1 ≥ f2", get("{f1}"), get("{f2}"), 0.0),
        Assertion::at_least("rank order f2 ≥ f3", get("{f2}"), get("{f3}"), 0.0),
        Assertion::at_least(
            "all three ≥ last two",
            get("{f1,f2,f3}"),
            get("{f2,f3}"),
            0.0,
        ),
    ];
    Ok((RankHeadReport { rows, assertions }, trained))
}

/// One SGD step on the first batch with and without auxiliary heads; true
/// when every non-auxiliary parameter ends bit-identical.
pub fn aux_isolation_check(config: &ExperimentConfig) -> Result<bool, NetError> {
    let mut cfg = config.clone();
    cfg.epochs = 1;
    cfg.dataset = ShapesSpec {
        train: cfg.batch_size.max(3),
        test: 3,
        ..cfg.dataset
    };
    let dataset = generate_shapes(&cfg.dataset)?;
    let plain = train_on(Model::new(&cfg, false)?, &dataset, None)?;
    let with_aux = train_on(Model::new(&cfg, true)?, &dataset, None)?;
    let (a, b) = (plain.model.params(), with_aux.model.params());
    let same = a.iter().all(|(_, name, t)| {
        b.find(name).is_some_and(|id| {
            let o = b.get(id);
            o.data()
                .iter()
                .zip(t.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    Ok(same)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub strides: Vec<usize>,
    /// Side of the final (square) feature map.
    pub map_extent: usize,
    pub test_acc: f64,
    pub sparsity: Option<f64>,
    pub foreground_mass: Option<f64>,
}

impl ModelSummary {
    fn of(t: &TrainedModel) -> Self {
        Self {
            strides: t.model.config().strides.clone(),
            map_extent: t.model.feature_extent(),
            test_acc: t.test.accuracy,
            sparsity: t.test.sparsity,
            foreground_mass: t.test.foreground_mass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillReport {
    pub teacher: ModelSummary,
    pub student: ModelSummary,
    pub alpha: f64,
    /// Student minus teacher test accuracy.
    pub accuracy_delta: f64,
    /// Set when the run reduces to plain training.
    pub degenerate: Option<String>,
    pub assertions: Vec<Assertion>,
}

impl DistillReport {
    pub fn passed(&self) -> bool {
        all_passed(&self.assertions)
    }
}

/// Trains the teacher plainly, then the student with the distillation loss
/// against it, and compares accuracy and attention sparsity.
pub fn distill_resolution_study(
    teacher_config: &ExperimentConfig,
    student_config: &ExperimentConfig,
) -> Result<(DistillReport, TrainedModel, TrainedModel), NetError> {
    let mut teacher_config = teacher_config.clone();
    teacher_config.alpha = None;
    teacher_config.teacher_checkpoint = None;
    let mut student_config = student_config.clone();
    student_config.teacher_checkpoint = None;
    teacher_config.validate()?;
    student_config.validate()?;
    student_config.check_teacher(true)?;
    let alpha = student_config.alpha.expect("checked");
    if teacher_config.dataset != student_config.dataset {
        return Err(NetError::Extent(
            "teacher and student must share the dataset spec".into(),
        ));
    }
    let (te, se) = (
        teacher_config.feature_extent()?,
        student_config.feature_extent()?,
    );
    if te > se {
        return Err(NetError::Extent(format!(
            "teacher maps ({te}×{te}) must not be finer than student maps ({se}×{se})"
        )));
    }
    let degenerate = (teacher_config.strides == student_config.strides && alpha == 1.0)
        .then(|| "degenerate: plain training".to_string());

    let dataset = generate_shapes(&student_config.dataset)?;
    let teacher = train_on(Model::new(&teacher_config, false)?, &dataset, None)?;
    let student = train_on(
        Model::new(&student_config, false)?,
        &dataset,
        Some(&teacher.model),
    )?;

    let (ts, ss) = (ModelSummary::of(&teacher), ModelSummary::of(&student));
    let mut assertions = vec![Assertion::at_least(
        "student accuracy within tolerance of teacher",
        ("student", ss.test_acc),
        ("teacher", ts.test_acc),
        -DISTILL_TOLERANCE,
    )];
    let (t_sp, s_sp) = (
        ts.sparsity.unwrap_or(f64::NAN),
        ss.sparsity.unwrap_or(f64::NAN),
    );
    assertions.push(Assertion {
        name: "student attention sparser than teacher".into(),
        passed: s_sp > t_sp,
        detail: format!("student s = {s_sp:.4} > teacher s = {t_sp:.4}"),
    });
    let report = DistillReport {
        accuracy_delta: ss.test_acc - ts.test_acc,
        teacher: ts,
        student: ss,
        alpha,
        degenerate,
        assertions,
    };
    Ok((report, teacher, student))
}
