//! Two-learner training over a task stream.
//!
//! For each task the plastic learner is trained with cross-entropy alone
//! and frozen as the teacher; the stable learner is then trained on
//! `alpha * CE + (1 - alpha) * KD(teacher) + L_CL`, the method's end-of-task
//! hook runs, and the stable learner is snapshotted and evaluated. Without a
//! plastic learner the stable loss is `CE + L_CL`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{shuffled_batches, Dataset, ExemplarMemory, TaskStream};
use crate::loss::{stable_loss_var, KdScope, LossConfig};
use crate::methods::{col_range, masked_kd, FrozenModel, LossContext, MethodHooks, TaskEnd};
use crate::metrics::{task_confusion, AccuracyMatrix, ConfusionMatrix, Count};
use crate::nn::{ArchSpec, Mode, Network, NetworkOutput};
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::rng::{self, tag};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Seed for initialisation and batch order.
    pub seed: u64,
    /// Apply distillation terms to replayed rows as well as current-task rows.
    #[serde(default = "yes")]
    pub distill_on_replay: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_first: 200,
            epochs_rest: 100,
            batch_size: 128,
            sgd: SgdConfig::default(),
            seed: 1993,
            distill_on_replay: true,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self, task: usize) -> usize {
        if task == 0 {
            self.epochs_first
        } else {
            self.epochs_rest
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.sgd;
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {:?}", self.sgd)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EngineConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Exemplar budget for replay methods; 0 disables the memory.
    pub memory_budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plastic,
    Stable,
}

/// One training epoch of one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub task: usize,
    pub phase: Phase,
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

/// Accuracy of the stable learner after one task.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEval {
    pub per_task: Vec<Count>,
    pub joint: Count,
    /// Labels and predictions on the joint test set, task by task.
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Receives progress while a stream runs.
pub trait EventSink {
    fn epoch(&mut self, _event: &EpochEvent) -> Result<()> {
        Ok(())
    }

    fn task_end(&mut self, _task: usize, _state: &DualArchState, _eval: &StepEval) -> Result<()> {
        Ok(())
    }
}

impl EventSink for () {}

/// Collects epoch events in memory.
#[derive(Debug, Default, Clone)]
pub struct EventLog(pub Vec<EpochEvent>);

impl EventSink for EventLog {
    fn epoch(&mut self, event: &EpochEvent) -> Result<()> {
        self.0.push(event.clone());
        Ok(())
    }
}

/// The two learners, their frozen companions and the method state.
pub struct DualArchState {
    pub stable: Network,
    pub plastic: Option<Network>,
    /// The plastic learner frozen after its phase of the current task.
    pub teacher: Option<FrozenModel>,
    /// The stable learner as it was at the end of the previous task.
    pub prev_stable: Option<FrozenModel>,
    pub memory: ExemplarMemory,
    pub method: MethodHooks,
    pub config: EngineConfig,
}

impl DualArchState {
    /// Builds both learners with heads for `initial_classes` classes.
    pub fn new(
        stable: &ArchSpec,
        plastic: Option<&ArchSpec>,
        method: MethodHooks,
        config: EngineConfig,
        initial_classes: usize,
    ) -> Result<Self> {
        config.train.validate()?;
        config.loss.validate()?;
        let seed = config.train.seed;
        let stable = Network::build(&stable.clone().with_classes(initial_classes), rng::derive_seed(seed, &[tag::STABLE_INIT]))?;
        let plastic = match plastic {
            Some(spec) => Some(Network::build(&spec.clone().with_classes(initial_classes), rng::derive_seed(seed, &[tag::PLASTIC_INIT]))?),
            None => None,
        };
        let budget = if method.uses_memory() { config.memory_budget } else { 0 };
        Ok(DualArchState { stable, plastic, teacher: None, prev_stable: None, memory: ExemplarMemory::new(budget), method, config })
    }

    /// Training indices for `task`: its own samples followed by the memory.
    pub fn training_indices(&self, stream: &TaskStream, task: usize) -> Vec<usize> {
        let mut idx = stream.train_indices(task).to_vec();
        idx.extend(self.memory.indices());
        idx
    }
}

fn ensure_classes(net: &mut Network, classes: usize) {
    if net.num_classes() < classes {
        net.grow_classifier(classes - net.num_classes());
    }
}

/// Per-batch loss builder: `(tape, output, x, labels, replay mask)`.
type BatchLoss<'f> = dyn for<'a> FnMut(&mut Tape<'a>, &NetworkOutput, &Tensor, &[usize], &[bool]) -> Result<Var> + 'f;

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &mut Network,
    ds: &Dataset,
    indices: &[usize],
    classes_old: usize,
    task: usize,
    phase: Phase,
    cfg: &TrainConfig,
    sink: &mut dyn EventSink,
    batch_loss: &mut BatchLoss<'_>,
) -> Result<()> {
    let epochs = cfg.epochs(task);
    let shuffle_tag = match phase {
        Phase::Plastic => tag::PLASTIC_SHUFFLE,
        Phase::Stable => tag::STABLE_SHUFFLE,
    };
    let mut order_rng = rng::stream(cfg.seed, &[shuffle_tag, task as u64]);
    let mut opt = OptimizerState::new(cfg.sgd, epochs);
    let phase_name = match phase {
        Phase::Plastic => "plastic",
        Phase::Stable => "stable",
    };
    for epoch in 0..epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        let batches = shuffled_batches(indices, cfg.batch_size, &mut order_rng);
        for (b, batch) in batches.iter().enumerate() {
            let (x, y) = ds.batch(batch);
            let replay: Vec<bool> = y.iter().map(|&c| c < classes_old).collect();
            let (loss, grads, stats) = {
                let mut tape = Tape::new();
                let xv = tape.constant_ref(&x);
                let out = net.forward(&mut tape, xv, Mode::Train)?;
                let l = batch_loss(&mut tape, &out, &x, &y, &replay)?;
                let loss = tape.value(l).item().ok_or_else(|| Error::NonScalarLoss(tape.shape(l).to_vec()))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { task, phase: phase_name, epoch, batch: b, loss: loss as f64 });
                }
                let mut g = tape.backward(l)?;
                let grads: Vec<Tensor> = out.param_vars.iter().map(|&v| g.take(v).expect("tracked")).collect();
                (loss, grads, out.batch_stats)
            };
            sgd_step(net.params_mut(), &grads, &mut opt).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { task, phase: phase_name, epoch, batch: b, loss: loss as f64 },
                other => other,
            })?;
            net.apply_batch_stats(&stats);
            total += loss as f64;
        }
        let event = EpochEvent { task, phase, epoch, loss: total / batches.len().max(1) as f64, lr: opt.learning_rate as f64 };
        sink.epoch(&event)?;
    }
    Ok(())
}

/// Trains the plastic learner on `task` with cross-entropy only and freezes
/// it as the teacher. A no-op in single-learner mode.
pub fn train_task_plastic(state: &mut DualArchState, stream: &TaskStream, task: usize, sink: &mut dyn EventSink) -> Result<()> {
    let indices = state.training_indices(stream, task);
    let classes = stream.task_classes(task);
    let cfg = state.config.train;
    let Some(plastic) = state.plastic.as_mut() else { return Ok(()) };
    ensure_classes(plastic, classes.end);
    let mut ce = |tape: &mut Tape<'_>, out: &NetworkOutput, _: &Tensor, y: &[usize], _: &[bool]| tape.cross_entropy(out.logits, y);
    run_phase(plastic, &stream.train, &indices, classes.start, task, Phase::Plastic, &cfg, sink, &mut ce)?;
    state.teacher = Some(FrozenModel::freeze(plastic));
    Ok(())
}

/// Trains the stable learner on `task`, runs the method's end-of-task hook
/// and snapshots the result as the next task's previous model.
pub fn train_task_stable(state: &mut DualArchState, stream: &TaskStream, task: usize, sink: &mut dyn EventSink) -> Result<()> {
    stable_phase(state, stream, task, sink)?;
    finish_task(state, stream, task)
}

fn stable_phase(state: &mut DualArchState, stream: &TaskStream, task: usize, sink: &mut dyn EventSink) -> Result<()> {
    let indices = state.training_indices(stream, task);
    let classes = stream.task_classes(task);
    let cfg = state.config.train;
    let LossConfig { alpha, temperature, kd_scope } = state.config.loss;
    ensure_classes(&mut state.stable, classes.end);
    let teacher = match (&state.teacher, &state.plastic) {
        (Some(t), Some(_)) if alpha < 1.0 => Some(t),
        _ => None,
    };
    let prev = state.prev_stable.as_ref();
    let method = &state.method;
    let mut loss = |tape: &mut Tape<'_>, out: &NetworkOutput, x: &Tensor, y: &[usize], replay: &[bool]| -> Result<Var> {
        let ctx = LossContext {
            task,
            classes_old: classes.start,
            classes_total: classes.end,
            prev,
            x,
            replay,
            on_replay: cfg.distill_on_replay,
        };
        let offset = method.ce_offset(&ctx);
        let ce = if offset > 0 && y.iter().all(|&c| c >= offset) {
            let local = tape.slice_cols(out.logits, offset, classes.end)?;
            let shifted: Vec<usize> = y.iter().map(|&c| c - offset).collect();
            tape.cross_entropy(local, &shifted)?
        } else {
            tape.cross_entropy(out.logits, y)?
        };
        let kd = match teacher {
            Some(t) => {
                let mask: Option<Vec<bool>> = (!cfg.distill_on_replay).then(|| replay.iter().map(|&r| !r).collect());
                let (teacher, student) = match kd_scope {
                    KdScope::All => (t.logits(x)?, out.logits),
                    KdScope::Current => (col_range(&t.logits(x)?, classes.start, classes.end), tape.slice_cols(out.logits, classes.start, classes.end)?),
                };
                masked_kd(tape, &teacher, student, temperature, mask.as_deref())?
            }
            None => None,
        };
        let cl = method.cl_loss(tape, out.logits, &ctx)?;
        let a = if kd.is_some() { alpha } else { 1.0 };
        stable_loss_var(tape, ce, kd, cl, a)
    };
    run_phase(&mut state.stable, &stream.train, &indices, classes.start, task, Phase::Stable, &cfg, sink, &mut loss)
}

fn finish_task(state: &mut DualArchState, stream: &TaskStream, task: usize) -> Result<()> {
    state.method.after_task(TaskEnd { task, stream, stable: &mut state.stable, memory: &mut state.memory })?;
    state.prev_stable = Some(FrozenModel::freeze(&state.stable));
    Ok(())
}

/// Accuracy of the stable learner on each task seen so far and on their
/// union.
pub fn evaluate(state: &DualArchState, stream: &TaskStream, task: usize) -> Result<StepEval> {
    let mut per_task = Vec::with_capacity(task + 1);
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for b in 0..=task {
        let idx = stream.test_indices(b);
        let mut correct = 0u64;
        for chunk in idx.chunks(512) {
            let (x, y) = stream.test.batch(chunk);
            let pred = state.method.classify(&state.stable, &x)?;
            correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count() as u64;
            labels.extend(y);
            predictions.extend(pred);
        }
        per_task.push(Count::new(correct, idx.len() as u64));
    }
    let joint = Count::new(per_task.iter().map(|c| c.correct).sum(), per_task.iter().map(|c| c.total).sum());
    Ok(StepEval { per_task, joint, labels, predictions })
}

/// A model held in memory at some step, for parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveModel {
    pub role: String,
    /// Parameters with the head as it is at this step.
    pub params: usize,
    /// Parameters with the head sized for every class of the stream.
    pub params_full_head: usize,
}

/// How classifier heads are counted in [`peak_param_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAccounting {
    /// Heads as they are at each step.
    Live,
    /// Every model counted with the final (all-class) head.
    FullHead,
}

/// Model reads observed during one task, for checking phase isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseReads {
    pub prev_stable_during_plastic: u64,
    pub prev_stable_during_stable: u64,
    pub teacher_during_stable: u64,
    pub teacher_during_eval: u64,
}

pub struct RunResult {
    pub matrix: AccuracyMatrix,
    /// Joint test labels and predictions after the last task.
    pub final_labels: Vec<usize>,
    pub final_predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub live_models: Vec<Vec<LiveModel>>,
    pub reads: Vec<PhaseReads>,
    pub diagnostics: Vec<Vec<(String, f64)>>,
    pub state: DualArchState,
}

fn live(role: &str, net: &Network, total_classes: usize) -> LiveModel {
    let head = net.feature_dim() + 1;
    let full = net.param_count() - head * net.num_classes() + head * total_classes;
    LiveModel { role: String::from(role), params: net.param_count(), params_full_head: full }
}

/// Runs every task of `stream`: plastic phase, teacher freeze, stable
/// phase, evaluation.
pub fn run_stream(
    stream: &TaskStream,
    stable: &ArchSpec,
    plastic: Option<&ArchSpec>,
    method: MethodHooks,
    config: EngineConfig,
    sink: &mut dyn EventSink,
) -> Result<RunResult> {
    let total = stream.num_classes();
    let mut state = DualArchState::new(stable, plastic, method, config, stream.classes_per_task)?;
    let mut matrix = AccuracyMatrix::new();
    let mut live_models = Vec::new();
    let mut reads = Vec::new();
    let mut diagnostics = Vec::new();
    let mut last = None;
    let prev_reads = |s: &DualArchState| s.prev_stable.as_ref().map_or(0, FrozenModel::reads);
    for task in 0..stream.num_tasks {
        state.method.before_task(task)?;
        let mut r = PhaseReads::default();
        let before = prev_reads(&state);
        train_task_plastic(&mut state, stream, task, sink)?;
        r.prev_stable_during_plastic = prev_reads(&state) - before;

        let mut models = Vec::new();
        if let Some(p) = &state.plastic {
            models.push(live("plastic", p, total));
        }
        ensure_classes(&mut state.stable, stream.task_classes(task).end);
        models.push(live("stable", &state.stable, total));
        if state.method.uses_previous_model() {
            if let Some(prev) = &state.prev_stable {
                models.push(live("previous_stable", prev.network(), total));
            }
        }
        live_models.push(models);

        let before = prev_reads(&state);
        let teacher_before = state.teacher.as_ref().map_or(0, FrozenModel::reads);
        stable_phase(&mut state, stream, task, sink)?;
        r.prev_stable_during_stable = prev_reads(&state) - before;
        finish_task(&mut state, stream, task)?;
        let teacher_after = state.teacher.as_ref().map_or(0, FrozenModel::reads);
        r.teacher_during_stable = teacher_after - teacher_before;

        let eval = evaluate(&state, stream, task)?;
        r.teacher_during_eval = state.teacher.as_ref().map_or(0, FrozenModel::reads) - teacher_after;
        reads.push(r);
        diagnostics.push(state.method.diagnostics());
        matrix.push_step(eval.per_task.clone(), eval.joint)?;
        sink.task_end(task, &state, &eval)?;
        last = Some(eval);
    }
    let last = last.ok_or_else(|| Error::InvalidArgument("stream has no tasks".into()))?;
    let confusion = task_confusion(&last.labels, &last.predictions, stream.classes_per_task, stream.num_tasks)?;
    Ok(RunResult {
        matrix,
        final_labels: last.labels,
        final_predictions: last.predictions,
        confusion,
        live_models,
        reads,
        diagnostics,
        state,
    })
}

/// Peak over steps of the summed parameters of all live models.
pub fn peak_param_report(run: &RunResult, accounting: HeadAccounting) -> usize {
    run.live_models
        .iter()
        .map(|models| {
            models
                .iter()
                .map(|m| match accounting {
                    HeadAccounting::Live => m.params,
                    HeadAccounting::FullHead => m.params_full_head,
                })
                .sum()
        })
        .max()
        .unwrap_or(0)
}

/// Mean accuracy of `net` (argmax) on `indices`, in percent.
pub fn train_accuracy(net: &Network, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(512) {
        let (x, y) = ds.batch(chunk);
        let pred = net.logits(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(100.0 * correct as f64 / indices.len().max(1) as f64)
}
