//! Minimal differentiable tensor library backing every trained network.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use conv::ConvGeometry;
pub use layers::{
    filter2d_valid, Conv1d, Conv2d, ConvTranspose1d, ConvTranspose2d, Linear, Module,
};
pub use optim::{clip_grad_norm, ema_update, grad_norm, Adam};
pub use tensor::{grad, no_grad, Tensor};
