//! Minimal dense tensor arithmetic with recorded reverse-mode differentiation,
//! a finite-difference gradient oracle, optimizer, and checkpoint container.
//!
//! All arithmetic is 64-bit. A [`Tape`] records one forward pass and supports
//! a single backward pass; gradients land in a [`ParamStore`]'s accumulators.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
pub(crate) mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use optim::AdamW;
pub use params::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("{primitive}: shape mismatch: {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
}
