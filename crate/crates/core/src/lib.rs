//! Multi-task networks that grow one task at a time.
//!
//! A [`jointnet::JointNet`] holds every task's chain of layers. When a new task
//! arrives it is bound to the prior task whose representations conflict least
//! with its own ([`conflict`]), and only the most conflicting layers are cloned
//! for it ([`bindgrow`]). The [`search`] module explores grow coefficients
//! globally and extracts Pareto fronts over (gain, parameter count).

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bindgrow;
pub mod conflict;
pub mod data;
pub mod error;
pub mod jointnet;
pub mod nn;
pub mod rng;
pub mod search;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Identifier of a task in a stream.
pub type TaskId = usize;
