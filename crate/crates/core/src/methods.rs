//! Continual-learning strategies: the extra loss term on the stable
//! learner, end-of-task hooks and the inference rule.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{ExemplarMemory, TaskStream};
use crate::loss::softmax_rows;
use crate::math::sqrt;
use crate::nn::Network;
use crate::{Error, Real, Result, Tensor};

/// A read-only copy of a learner (weights and batchnorm statistics) that
/// counts how often it is queried.
#[derive(Debug)]
pub struct FrozenModel {
    net: Network,
    reads: AtomicU64,
}

impl Clone for FrozenModel {
    fn clone(&self) -> Self {
        FrozenModel { net: self.net.clone(), reads: AtomicU64::new(self.reads()) }
    }
}

impl FrozenModel {
    pub fn freeze(net: &Network) -> Self {
        FrozenModel { net: net.clone(), reads: AtomicU64::new(0) }
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.net.logits(x)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

/// What a method sees when computing its loss term on one batch.
pub struct LossContext<'r> {
    pub task: usize,
    /// Classes learned before the current task.
    pub classes_old: usize,
    pub classes_total: usize,
    /// The stable learner as it was at the end of the previous task.
    pub prev: Option<&'r FrozenModel>,
    pub x: &'r Tensor,
    /// Rows drawn from the exemplar memory rather than the current task.
    pub replay: &'r [bool],
    /// Whether the loss also covers replayed rows.
    pub on_replay: bool,
}

/// What a method may change once a task is learned.
pub struct TaskEnd<'r> {
    pub task: usize,
    pub stream: &'r TaskStream,
    pub stable: &'r mut Network,
    pub memory: &'r mut ExemplarMemory,
}

/// Strategy interface. Implementations must not mutate the previous-model
/// snapshot (they only ever receive it by shared reference).
pub trait ClMethod {
    fn name(&self) -> &'static str;

    /// Whether training batches include the exemplar memory.
    fn uses_memory(&self) -> bool {
        false
    }

    /// Whether the loss needs the previous stable learner, which then counts
    /// as a live model.
    fn uses_previous_model(&self) -> bool {
        false
    }

    fn before_task(&mut self, _task: usize) -> Result<()> {
        Ok(())
    }

    /// First class covered by the stable learner's cross-entropy. With an
    /// offset `o > 0` the term is computed on logits `o..` against labels
    /// shifted by `o`; batches holding a label below `o` use every logit.
    fn ce_offset(&self, _ctx: &LossContext<'_>) -> usize {
        0
    }

    /// Extra loss on the stable learner's `logits` (`None` means zero).
    fn cl_loss<'a>(&self, _tape: &mut Tape<'a>, _logits: Var, _ctx: &LossContext<'_>) -> Result<Option<Var>> {
        Ok(None)
    }

    fn after_task(&mut self, _end: TaskEnd<'_>) -> Result<()> {
        Ok(())
    }

    /// Predicted labels for a batch.
    fn classify(&self, net: &Network, x: &Tensor) -> Result<Vec<usize>> {
        Ok(net.logits(x)?.argmax_rows())
    }

    /// Diagnostic values from the last `after_task` (e.g. the WA factor).
    fn diagnostics(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

pub type MethodHooks = Box<dyn ClMethod>;

/// Method choice and parameters, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    Finetune,
    Er,
    Lwf {
        #[serde(default = "one")]
        lambda: Real,
        #[serde(default = "two")]
        temperature: Real,
        /// Cross-entropy over the current task's classes only.
        #[serde(default)]
        local_ce: bool,
    },
    Icarl {
        #[serde(default = "one")]
        lambda: Real,
        #[serde(default = "two")]
        temperature: Real,
    },
    Wa {
        /// Fixed distillation weight; by default `classes_old / classes_total`.
        #[serde(default)]
        lambda: Option<Real>,
        #[serde(default = "two")]
        temperature: Real,
        /// Rescale new-class classifier rows after each task.
        #[serde(default = "yes")]
        align: bool,
    },
}

fn one() -> Real {
    1.0
}

fn two() -> Real {
    2.0
}

fn yes() -> bool {
    true
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Finetune => "finetune",
            MethodConfig::Er => "er",
            MethodConfig::Lwf { .. } => "lwf",
            MethodConfig::Icarl { .. } => "icarl",
            MethodConfig::Wa { .. } => "wa",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |lambda: Real, t: Real| {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", lambda)));
            }
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", t)));
            }
            Ok(())
        };
        match *self {
            MethodConfig::Finetune | MethodConfig::Er => Ok(()),
            MethodConfig::Lwf { lambda, temperature, .. } | MethodConfig::Icarl { lambda, temperature } => check(lambda, temperature),
            MethodConfig::Wa { lambda, temperature, .. } => check(lambda.unwrap_or(0.0), temperature),
        }
    }

    pub fn build(&self) -> Result<MethodHooks> {
        self.validate()?;
        Ok(match *self {
            MethodConfig::Finetune => finetune_hooks(),
            MethodConfig::Er => er_hooks(),
            MethodConfig::Lwf { lambda, temperature, local_ce } => lwf_hooks_with(lambda, temperature, local_ce),
            MethodConfig::Icarl { lambda, temperature } => icarl_hooks(lambda, temperature),
            MethodConfig::Wa { lambda, temperature, align } => wa_hooks(lambda, temperature, align),
        })
    }
}

/// Distillation of `student` towards constant `teacher` logits at
/// temperature `t`, averaged over the rows selected by `mask` (all rows when
/// `mask` is `None`). Returns `None` when no row is selected.
pub fn masked_kd<'a>(tape: &mut Tape<'a>, teacher: &Tensor, student: Var, t: Real, mask: Option<&[bool]>) -> Result<Option<Var>> {
    if teacher.shape() != tape.shape(student) {
        return Err(Error::ShapeMismatch { op: "kd_loss", lhs: teacher.shape().to_vec(), rhs: tape.shape(student).to_vec() });
    }
    let n = teacher.shape()[0];
    let mut target = softmax_rows(teacher, t)?;
    let kept = match mask {
        None => n,
        Some(m) => {
            let c = teacher.shape()[1];
            for (i, &keep) in m.iter().enumerate() {
                if !keep {
                    target.data_mut()[i * c..(i + 1) * c].fill(0.0);
                }
            }
            m.iter().filter(|&&k| k).count()
        }
    };
    if kept == 0 {
        return Ok(None);
    }
    let scaled = tape.scale(student, 1.0 / t);
    let loss = tape.soft_cross_entropy(scaled, target)?;
    Ok(Some(if kept == n { loss } else { tape.scale(loss, n as Real / kept as Real) }))
}

/// Columns `start..end` of every row.
pub(crate) fn col_range(t: &Tensor, start: usize, end: usize) -> Tensor {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(n * (end - start));
    for i in 0..n {
        out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
    }
    Tensor::new(vec![n, end - start], out).expect("sized")
}

/// `lambda * KD(prev[:, :old], current[:, :old], t)`: the previous model's
/// old-class outputs as soft targets for the current model.
fn old_class_distillation<'a>(tape: &mut Tape<'a>, logits: Var, ctx: &LossContext<'_>, lambda: Real, t: Real) -> Result<Option<Var>> {
    let Some(prev) = ctx.prev else { return Ok(None) };
    if ctx.classes_old == 0 || lambda == 0.0 {
        return Ok(None);
    }
    let teacher = col_range(&prev.logits(ctx.x)?, 0, ctx.classes_old);
    let student = tape.slice_cols(logits, 0, ctx.classes_old)?;
    let mask: Option<Vec<bool>> = (!ctx.on_replay).then(|| ctx.replay.iter().map(|&r| !r).collect());
    let Some(kd) = masked_kd(tape, &teacher, student, t, mask.as_deref())? else { return Ok(None) };
    Ok(Some(if lambda == 1.0 { kd } else { tape.scale(kd, lambda) }))
}

/// L2-normalised penultimate features of `indices` from `net`, evaluated in
/// chunks to bound memory.
pub fn normalized_features(net: &Network, ds: &crate::data::Dataset, indices: &[usize]) -> Result<Tensor> {
    let f = net.feature_dim();
    let mut out = Vec::with_capacity(indices.len() * f);
    for chunk in indices.chunks(256) {
        let (x, _) = ds.batch(chunk);
        let feats = net.features(&x)?;
        for i in 0..chunk.len() {
            out.extend(l2_normalize(feats.row(i)));
        }
    }
    Tensor::new(vec![indices.len(), f], out)
}

fn l2_normalize(v: &[Real]) -> Vec<Real> {
    let n = sqrt(v.iter().map(|x| x * x).sum::<Real>());
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Rebalances `memory` and adds the classes of the task just learned, with
/// herding over the stable learner's normalised features.
pub fn update_memory(end: &mut TaskEnd<'_>) -> Result<()> {
    let classes = end.stream.task_classes(end.task);
    let net = &*end.stable;
    let ds = &end.stream.train;
    end.memory.update(ds, classes, |idx| normalized_features(net, ds, idx))
}

/// Nearest class mean by Euclidean distance; exact ties go to the lowest
/// class index.
pub fn nme_classify(features: &Tensor, means: &[Vec<Real>]) -> Vec<usize> {
    let f = features.shape().get(1).copied().unwrap_or(0);
    (0..features.shape()[0])
        .map(|i| {
            let q = &features.data()[i * f..(i + 1) * f];
            let mut best = 0;
            let mut best_d = Real::INFINITY;
            for (c, m) in means.iter().enumerate() {
                let d: Real = q.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Scales rows `old..total` of the classifier by
/// `mean |w_old| / mean |w_new|` and returns the factor. Does nothing (and
/// returns 1) when either group is empty or the new rows are all zero.
pub fn weight_align(net: &mut Network, old: usize) -> Real {
    let Some(w) = net.head_weight() else { return 1.0 };
    let (total, f) = (w.shape()[0], w.shape()[1]);
    if old == 0 || old >= total {
        return 1.0;
    }
    let norm = |r: usize| sqrt(w.data()[r * f..(r + 1) * f].iter().map(|x| x * x).sum::<Real>());
    let mean_old = (0..old).map(norm).sum::<Real>() / old as Real;
    let mean_new = (old..total).map(norm).sum::<Real>() / (total - old) as Real;
    if mean_new == 0.0 {
        return 1.0;
    }
    let gamma = mean_old / mean_new;
    net.scale_head_rows(old..total, gamma);
    gamma
}

struct Finetune;

impl ClMethod for Finetune {
    fn name(&self) -> &'static str {
        "finetune"
    }
}

/// Plain cross-entropy, no memory, argmax prediction.
pub fn finetune_hooks() -> MethodHooks {
    Box::new(Finetune)
}

struct Er;

impl ClMethod for Er {
    fn name(&self) -> &'static str {
        "er"
    }

    fn uses_memory(&self) -> bool {
        true
    }

    fn after_task(&mut self, mut end: TaskEnd<'_>) -> Result<()> {
        update_memory(&mut end)
    }
}

/// Replay through the training data only.
pub fn er_hooks() -> MethodHooks {
    Box::new(Er)
}

struct Lwf {
    lambda: Real,
    t: Real,
    local_ce: bool,
}

impl ClMethod for Lwf {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn uses_previous_model(&self) -> bool {
        true
    }

    fn ce_offset(&self, ctx: &LossContext<'_>) -> usize {
        if self.local_ce {
            ctx.classes_old
        } else {
            0
        }
    }

    fn cl_loss<'a>(&self, tape: &mut Tape<'a>, logits: Var, ctx: &LossContext<'_>) -> Result<Option<Var>> {
        old_class_distillation(tape, logits, ctx, self.lambda, self.t)
    }
}

/// Distillation from the previous model on old-class outputs, with
/// cross-entropy over every class seen so far.
pub fn lwf_hooks(lambda: Real, t: Real) -> MethodHooks {
    lwf_hooks_with(lambda, t, false)
}

/// As [`lwf_hooks`]; `local_ce` restricts the cross-entropy to the current
/// task's classes.
pub fn lwf_hooks_with(lambda: Real, t: Real, local_ce: bool) -> MethodHooks {
    Box::new(Lwf { lambda, t, local_ce })
}

struct Icarl {
    lambda: Real,
    t: Real,
    means: Vec<Vec<Real>>,
}

impl ClMethod for Icarl {
    fn name(&self) -> &'static str {
        "icarl"
    }

    fn uses_memory(&self) -> bool {
        true
    }

    fn uses_previous_model(&self) -> bool {
        true
    }

    fn cl_loss<'a>(&self, tape: &mut Tape<'a>, logits: Var, ctx: &LossContext<'_>) -> Result<Option<Var>> {
        old_class_distillation(tape, logits, ctx, self.lambda, self.t)
    }

    fn after_task(&mut self, mut end: TaskEnd<'_>) -> Result<()> {
        update_memory(&mut end)?;
        let seen = end.stream.task_classes(end.task).end;
        self.means.clear();
        for c in 0..seen {
            let idx = end.memory.exemplars(c);
            if idx.is_empty() {
                self.means.clear();
                return Ok(());
            }
            let feats = normalized_features(end.stable, &end.stream.train, idx)?;
            let f = feats.shape()[1];
            let mut mean = vec![0.0; f];
            for i in 0..idx.len() {
                for (m, v) in mean.iter_mut().zip(feats.row(i)) {
                    *m += v;
                }
            }
            self.means.push(l2_normalize(&mean));
        }
        Ok(())
    }

    /// Nearest mean of exemplars once every seen class has exemplars;
    /// argmax over logits otherwise (e.g. with the memory disabled).
    fn classify(&self, net: &Network, x: &Tensor) -> Result<Vec<usize>> {
        if self.means.len() != net.num_classes() {
            return Ok(net.logits(x)?.argmax_rows());
        }
        let feats = net.features(x)?;
        let f = feats.shape()[1];
        let mut normed = Vec::with_capacity(feats.len());
        for i in 0..feats.shape()[0] {
            normed.extend(l2_normalize(feats.row(i)));
        }
        Ok(nme_classify(&Tensor::new(vec![feats.shape()[0], f], normed)?, &self.means))
    }
}

/// Herding memory, old-class distillation and nearest-mean-of-exemplars
/// prediction in normalised feature space.
pub fn icarl_hooks(lambda: Real, t: Real) -> MethodHooks {
    Box::new(Icarl { lambda, t, means: Vec::new() })
}

struct Wa {
    lambda: Option<Real>,
    t: Real,
    align: bool,
    gamma: Option<Real>,
}

impl ClMethod for Wa {
    fn name(&self) -> &'static str {
        "wa"
    }

    fn uses_memory(&self) -> bool {
        true
    }

    fn uses_previous_model(&self) -> bool {
        true
    }

    fn cl_loss<'a>(&self, tape: &mut Tape<'a>, logits: Var, ctx: &LossContext<'_>) -> Result<Option<Var>> {
        let lambda = self.lambda.unwrap_or(ctx.classes_old as Real / ctx.classes_total.max(1) as Real);
        old_class_distillation(tape, logits, ctx, lambda, self.t)
    }

    fn after_task(&mut self, mut end: TaskEnd<'_>) -> Result<()> {
        self.gamma = None;
        if self.align && end.task > 0 {
            let old = end.stream.task_classes(end.task).start;
            self.gamma = Some(weight_align(end.stable, old));
        }
        update_memory(&mut end)
    }

    fn diagnostics(&self) -> Vec<(String, f64)> {
        self.gamma.map(|g| (String::from("wa_gamma"), g as f64)).into_iter().collect()
    }
}

/// Old-class distillation plus post-task alignment of new-class classifier
/// norms to old-class norms.
pub fn wa_hooks(lambda: Option<Real>, t: Real, align: bool) -> MethodHooks {
    Box::new(Wa { lambda, t, align, gamma: None })
}
