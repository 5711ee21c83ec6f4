//! GRU-FCN time-series classifier: tensors, layers, model, training loop,
//! UCR-format data handling and evaluation statistics.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use model::{parameter_count, ArchConfig, CellKind, GruFcnModel};
