//! Minimal differentiable-programming toolkit: dense tensors, a tape-based
//! autodiff graph with second-order support, GRU/linear layers, optimizers
//! and ordered data-parallel batch helpers.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod tensor;

pub use error::NnError;
pub use graph::{Backward, Graph, Var};
pub use layers::{Embedding, Gru, GruCell, Linear};
pub use optim::{LrSchedule, OptimConfig, Optimizer, OptimizerKind};
pub use parallel::Parallelism;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
