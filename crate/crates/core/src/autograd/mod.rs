//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so node ids are a
//! topological order by construction. [`Tape::backward`] consumes the tape
//! and sweeps it once in reverse.
//!
//! Shape rules per primitive:
//! - `matmul`: `[M,K] x [K,N] -> [M,N]`
//! - `linear`: `x [N,I]`, `w [O,I]`, optional `b [O]` -> `[N,O]`
//! - `conv2d`: `x [N,C,H,W]` (NCHW), `w [K,C,R,S]` (KCRS), stride, zero
//!   padding -> `[N,K,OH,OW]`
//! - `batchnorm`: `x [N,C]` or `[N,C,H,W]`, per-channel `gamma`/`beta [C]`
//! - `avgpool`/`maxpool`: `[N,C,H,W]`
//! - `add`, `mul`: identical shapes
//! - `concat`: equal shapes except along `axis`

mod kernels;
mod ops;

pub use kernels::{adaptive_window, out_extent};
pub use ops::{BatchStats, Pool};

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<'a> {
    pub value: Cow<'a, Tensor>,
    pub op: ops::Op,
    pub requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), ops::Op::Leaf, true)
    }

    /// Owned leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), ops::Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), ops::Op::Leaf, false)
    }

    /// Borrowed leaf without gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), ops::Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Cow<'a, Tensor>, op: ops::Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `loss`. Every leaf created with gradient tracking
    /// gets an entry, all-zero when the loss does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape();
        if !shape.iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(shape, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, ops::Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward_node(&self.nodes, i, g, &mut grads)?;
        }
        let mut out = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            let entry = if node.requires_grad && matches!(node.op, ops::Op::Leaf) {
                Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            } else {
                None
            };
            out.push(entry);
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of the leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf; `None` for untracked leaves and
    /// intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn accumulate_with(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [Real])) {
    let acc = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(acc.data_mut());
}

#[cfg(test)]
mod tests;
