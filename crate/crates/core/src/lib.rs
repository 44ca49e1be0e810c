//! Desk-scale decision transformer for quadruped gait imitation, with a
//! compression laboratory (uniform quantization, magnitude pruning,
//! fine-tuning), a bit-exact checkpoint format and a Monte-Carlo evaluation
//! harness.

pub mod checkpoint;
pub mod compress;
pub mod dt;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod scalar;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
pub type DtModel = dt::DecisionTransformer<f32>;
