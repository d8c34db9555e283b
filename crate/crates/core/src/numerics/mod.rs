//! Dense tensors, layer kernels, reverse-mode gradients and the optimizer.

pub mod autograd;
pub mod ops;
pub mod optim;
mod param;
mod scalar;
mod tensor;

pub use autograd::{Tape, Var};
pub use ops::{layer_forward, BnStats, LayerKind};
pub use optim::{clip_grad_norm, Adam, AdamConfig, Schedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Real;
pub use tensor::{Tensor, MAX_RANK};
