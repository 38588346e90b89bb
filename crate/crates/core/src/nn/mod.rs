//! A small deterministic CNN engine.
//!
//! The network is fixed: two 3×3 "same"-padded convolutions with ReLU,
//! a hidden fully-connected layer with ReLU and a linear output layer.
//! Gradients are derived by hand for that architecture. All parameters live
//! in a single [`FlatWeights`] vector, which is what federation, clustering
//! and similarity computations operate on.

mod checkpoint;
mod cnn;
mod optim;
mod spec;
mod tensor;
mod weights;

pub use checkpoint::{
    read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file,
};
pub(crate) use cnn::argmax;
pub use cnn::{forward, loss_and_grad, predict, softmax_cross_entropy};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use spec::CnnSpec;
pub use tensor::Tensor;
pub use weights::{flatten, init_weights, unflatten, FlatWeights, LayerSlot, Layout, NamedTensor};
