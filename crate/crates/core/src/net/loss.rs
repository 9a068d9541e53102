use crate::autograd::{Graph, Var};

use super::NetError;

/// Loss node plus the two batch-mean components, as recorded values.
#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    pub loss: Var,
    pub cross_entropy: f64,
    pub kl: f64,
}

/// `1/B · Σ_b [α·CE(student_b, y_b) + (1 − α)·KL(teacher_b ‖ student_b)]`.
///
/// Teacher logits enter through `stop_gradient`. Both terms are recorded
/// even when one of them carries zero weight.
pub fn distillation_loss(
    graph: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    labels: &[usize],
    alpha: f64,
) -> Result<DistillTerms, NetError> {
    if student.len() != teacher.len() || student.len() != labels.len() {
        return Err(NetError::Extent(format!(
            "batch extents differ: student {}, teacher {}, labels {}",
            student.len(),
            teacher.len(),
            labels.len()
        )));
    }
    if student.is_empty() {
        return Err(NetError::Extent("empty batch".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NetError::Config {
            field: "alpha".into(),
            reason: format!("{alpha} outside [0, 1]"),
        });
    }
    let mut total: Option<Var> = None;
    let (mut ce_sum, mut kl_sum) = (0.0, 0.0);
    for ((&s, &t), &y) in student.iter().zip(teacher).zip(labels) {
        let (ks, kt) = (
            graph.value(s).shape().to_vec(),
            graph.value(t).shape().to_vec(),
        );
        if ks != kt {
            return Err(NetError::Extent(format!(
                "class extents differ: student {ks:?}, teacher {kt:?}"
            )));
        }
        let t = graph.stop_gradient(t)?;
        let ce = graph.cross_entropy(s, y)?;
        let kl = graph.kl_divergence(t, s)?;
        ce_sum += graph.value(ce).item();
        kl_sum += graph.value(kl).item();
        let a = graph.scale(ce, alpha)?;
        let b = graph.scale(kl, 1.0 - alpha)?;
        let term = graph.add(a, b)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    let batch = student.len() as f64;
    let loss = graph.scale(total.expect("non-empty batch"), 1.0 / batch)?;
    Ok(DistillTerms {
        loss,
        cross_entropy: ce_sum / batch,
        kl: kl_sum / batch,
    })
}
