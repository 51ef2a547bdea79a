//! Momentum SGD with weight decay and a per-task cosine learning-rate
//! schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{cos, PI};
use crate::nn::Param;
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: Real) -> Real {
    if total_epochs == 0 {
        return lr0;
    }
    let e = epoch.min(total_epochs) as Real;
    lr0 * (1.0 + cos(PI * e / total_epochs as Real)) / 2.0
}

/// Optimizer state for one learner during one task.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub learning_rate: Real,
    pub epoch: usize,
    pub total_epochs: usize,
    buffers: Vec<Vec<Real>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, total_epochs: usize) -> Self {
        OptimizerState { config, learning_rate: config.lr, epoch: 0, total_epochs, buffers: Vec::new() }
    }

    /// Moves the schedule to `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.learning_rate = cosine_lr(epoch, self.total_epochs, self.config.lr);
    }

    pub fn momentum_buffers(&self) -> &[Vec<Real>] {
        &self.buffers
    }
}

/// `buf = momentum * buf + grad + wd * param; param -= lr * buf`.
///
/// All gradients are checked before any parameter moves, so a rejected
/// step leaves parameters and buffers untouched.
pub fn sgd_step(params: &mut [Param], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::ShapeMismatch { op: "sgd_step", lhs: p.tensor.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    if state.buffers.len() != params.len() {
        state.buffers = params.iter().map(|p| alloc::vec![0.0; p.tensor.len()]).collect();
    }
    let SgdConfig { momentum, weight_decay, .. } = state.config;
    let lr = state.learning_rate;
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        for ((w, &d), b) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
            *b = momentum * *b + d + weight_decay * *w;
            *w -= lr * *b;
        }
    }
    Ok(())
}
