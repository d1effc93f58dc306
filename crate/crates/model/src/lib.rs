//! Differentiable graph attention model, training, continual adaptation and
//! post-hoc analyses for power-flow surrogates.

pub mod batch;
pub mod checkpoint;
pub mod continual;
pub mod error;
pub mod interp;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use batch::{Batch, PreparedGraph};
pub use checkpoint::Checkpoint;
pub use error::{ModelError, ModelResult};
pub use model::{Forward, Mode, Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
