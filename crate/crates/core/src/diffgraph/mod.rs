//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the enrollment networks need are provided. A
//! [`Graph`] is built fresh for every forward pass and evaluated eagerly;
//! [`Graph::backward`] returns gradients for parameters and tracked inputs.

mod graph;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{GammaTarget, Gradients, Graph, Mode, Var, LAYER_NORM_EPS};
pub use layers::{
    init_attention, init_layer_norm, layer_norm, linear, multi_head_attention, LEAKY_SLOPE,
};
pub use optim::{adamw_step, rmsprop_step, OptimizerKind, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;
