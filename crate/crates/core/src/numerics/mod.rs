//! Differentiable numerical kernel: tensors, the gradient tape, parameters and Adam.

mod adam;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, WeightDecay};
pub use params::{kaiming_uniform, normal, Bound, Param, ParamStore};
pub use real::{real, Real};
pub use tape::{cosine, Gradients, Tape, Var};
pub use tensor::Tensor;
