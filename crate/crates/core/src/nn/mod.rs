//! Minimal CPU neural-network substrate: CHW tensors, a convolutional net
//! with hand-written backpropagation, and first-order optimizers.

mod conv;
mod optim;
mod tensor;

pub use conv::{Backbone, ConvCache, ConvNet, LayerSpec};
pub use optim::Optimizer;
pub use tensor::{Normalization, Tensor};
