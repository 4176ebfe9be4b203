//! Minimal f64 neural-network toolkit: tensors, a differentiation tape,
//! transformer and residual-conv layers, and AdamW.

mod graph;
mod params;
mod tensor;

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod resnet;

pub use graph::{Gradients, Graph, Var};
pub use params::{Grads, ParamId, ParamSet};
pub use tensor::Tensor;
