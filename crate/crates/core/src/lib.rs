//! Continual-learning engine with a two-learner (plastic teacher, stable
//! student) training loop.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! dataset readers live in the `clbench` companion crate.
//!
//! Layout:
//! - [`tensor`], [`autograd`]: dense tensors and a reverse-mode tape.
//! - [`nn`]: residual-network and MLP factories, parameter and FLOP counts.
//! - [`loss`], [`optim`]: cross-entropy, temperature distillation, SGD with
//!   cosine annealing.
//! - [`data`]: datasets, class-incremental task streams, exemplar memory.
//! - [`methods`]: fine-tune, ER, LwF, iCaRL and WA hooks.
//! - [`engine`]: the per-task plastic-then-stable training procedure.
//! - [`metrics`]: accuracy matrix, forgetting measures, task confusion.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]
// Casts to `Real` are identities only in the default f64 build.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod engine;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod methods;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use math::Real;
pub use tensor::Tensor;
