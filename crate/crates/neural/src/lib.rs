//! Convolutional encoder that predicts a time-frequency mixing field from
//! microphone STFTs and array geometry, with the training stack it needs.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use graph::{Grads, Graph, Var};
pub use network::{MixingField, Network, NetworkConfig};
pub use optim::Adam;
pub use params::{ParamId, ParameterStore};
pub use real::Real;
pub use tensor::Tensor;
pub use train::{train_loop, BatchProvider, InMemory, LossTrace, TrainConfig, TrainExample};
