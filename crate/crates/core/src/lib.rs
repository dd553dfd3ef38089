//! Handwritten mathematical expression recognition: a multi-scale dense
//! convolutional encoder, a coverage-attention GRU decoder, and the training,
//! evaluation and data tooling around them.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use exec::Exec;
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig, ModelError};
pub use tensor::{Tensor, TensorError};
pub use vocab::Vocabulary;
pub use train::{TrainConfig, Trainer};
