//! Minimal differentiable kernel: tensors, a reverse-mode tape, the GRU
//! cell, and the two optimizers the models use.

pub mod graph;
pub mod gru;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use gru::{gru_cell, gru_sequence, GruNodes, GruParams};
pub use optim::{glorot_uniform, OptimizerKind, OptimizerState, ParamSet};
pub use tensor::Tensor;
