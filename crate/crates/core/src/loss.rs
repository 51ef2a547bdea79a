//! Classification and distillation losses.
//!
//! Scalar helpers operate on a single logit vector; the `*_var` variants
//! record batch-mean losses on a tape.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::math::{exp, ln, log_sum_exp};
use crate::{Error, Real, Result, Tensor};

/// Weighting of the stable learner's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of cross-entropy; distillation gets `1 - alpha`.
    pub alpha: Real,
    pub temperature: Real,
    /// Logit columns the teacher distillation covers.
    pub kd_scope: KdScope,
}

/// Columns compared by the teacher-to-stable distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdScope {
    /// Every class seen so far.
    #[default]
    All,
    /// Only the current task's classes.
    Current,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, temperature: 2.0, kd_scope: KdScope::All }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: Real) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {}", t)))
    }
}

/// `softmax(logits / t)`.
pub fn softmax_temperature(logits: &[Real], t: Real) -> Result<Vec<Real>> {
    check_temperature(t)?;
    let scaled: Vec<Real> = logits.iter().map(|&z| z / t).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|&z| exp(z - lse)).collect())
}

/// Row-wise [`softmax_temperature`] of a `[N, C]` tensor.
pub fn softmax_rows(logits: &Tensor, t: Real) -> Result<Tensor> {
    check_temperature(t)?;
    if logits.ndim() != 2 {
        return Err(Error::InvalidShape { op: "softmax_rows", msg: format!("expected [N, C], got {:?}", logits.shape()) });
    }
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.shape()[0] {
        out.extend(softmax_temperature(logits.row(i), t)?);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[Real]) -> Real {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * ln(q)).sum::<Real>()
}

/// `-log softmax(logits)[label]`.
pub fn ce_loss(logits: &[Real], label: usize) -> Result<Real> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// `-sum_i P_T,i log P_S,i` with both distributions at temperature `t`.
pub fn kd_loss(teacher_logits: &[Real], student_logits: &[Real], t: Real) -> Result<Real> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: alloc::vec![teacher_logits.len()],
            rhs: alloc::vec![student_logits.len()],
        });
    }
    let pt = softmax_temperature(teacher_logits, t)?;
    let scaled: Vec<Real> = student_logits.iter().map(|&z| z / t).collect();
    let lse = log_sum_exp(&scaled);
    Ok(-pt.iter().zip(&scaled).map(|(&p, &z)| p * (z - lse)).sum::<Real>())
}

/// `alpha * ce + (1 - alpha) * kd + cl`.
pub fn stable_loss(ce: Real, kd: Real, cl: Real, alpha: Real) -> Real {
    alpha * ce + (1.0 - alpha) * kd + cl
}

/// Batch-mean cross-entropy of `[N, C]` logits.
pub fn ce_loss_var(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Batch-mean distillation of `student` towards fixed `teacher` logits. The
/// teacher enters only through its (constant) soft targets.
pub fn kd_loss_var(tape: &mut Tape<'_>, teacher: &Tensor, student: Var, t: Real) -> Result<Var> {
    if teacher.shape() != tape.shape(student) {
        return Err(Error::ShapeMismatch { op: "kd_loss", lhs: teacher.shape().to_vec(), rhs: tape.shape(student).to_vec() });
    }
    let target = softmax_rows(teacher, t)?;
    let scaled = tape.scale(student, 1.0 / t);
    tape.soft_cross_entropy(scaled, target)
}

/// Tape form of [`stable_loss`]. Terms whose weight is exactly zero are
/// left out of the graph.
pub fn stable_loss_var(tape: &mut Tape<'_>, ce: Var, kd: Option<Var>, cl: Option<Var>, alpha: Real) -> Result<Var> {
    let mut total = match kd {
        Some(kd) if alpha < 1.0 => {
            let a = tape.scale(ce, alpha);
            let b = tape.scale(kd, 1.0 - alpha);
            tape.add(a, b)?
        }
        _ => ce,
    };
    if let Some(cl) = cl {
        total = tape.add(total, cl)?;
    }
    Ok(total)
}
