//! Dense tensors, reverse-mode autodiff and the layer set of a GPT-style
//! decision transformer.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamConfig, AdamState, ParamSlot};
pub use graph::{Gradients, Graph, QueryRows, Var};
pub use layers::{
    causal_self_attention, forward_layer_norm, forward_linear, BoundLayer, LayerKind, LayerParams, LayerQuant,
    QuantGrid,
};
pub use tensor::Tensor;
