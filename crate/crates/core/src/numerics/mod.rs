//! Dense tensors, forward kernels and the gradient tape.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use kernels::{
    causal_depthwise_conv1d, layer_norm, linear, silu_tensor as silu, softplus_tensor as softplus,
};
pub use params::{Binder, ParamStore};
pub use tape::{Activation, BackwardRule, GradTape, Gradients, Var};
pub use tensor::Tensor;
