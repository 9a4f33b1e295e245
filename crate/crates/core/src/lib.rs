//! A spiking point-cloud classifier trained with a single
//! time step (optionally with random initial membrane potential) and run with
//! several time steps at inference, averaging the per-step logits.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors and a fixed-op reverse-mode tape.
//! - [`neuron`]: LIF dynamics, tanh surrogate gradient, membrane perturbation.
//! - [`model`]: vanilla PointNet in ANN (ReLU) and SNN (LIF) form, checkpoints.
//! - [`data`]: OFF meshes, surface sampling, synthetic shapes, dataset cache.
//! - [`train`]: optimizer, training loop, multi-step evaluation, paradigm comparison.
//! - [`energy`]: operation counting, energy estimates, gradient histograms.

pub mod data;
pub mod energy;
pub mod model;
pub mod neuron;
pub mod rng;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }
}
