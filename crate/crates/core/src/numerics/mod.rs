//! Dense tensors, reverse-mode autodiff, Adam and the step-decay schedule.

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState, LrSchedule};
pub use graph::{
    prelu_forward, sigmoid, sigmoid_cross_entropy, softmax, Gradients, Graph, ParamRef, Var,
};
pub use tensor::{dot, matvec_bias, matvec_t_acc, outer_acc, Tensor};
