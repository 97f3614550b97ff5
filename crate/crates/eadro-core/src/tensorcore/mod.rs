//! Minimal differentiable-computation substrate: dense tensors, the forward
//! operators the model needs, reverse-mode gradients, a finite-difference
//! gradient checker and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod ops;
mod scalar;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Program};
pub use scalar::Scalar;
pub use store::{is_state_name, ParameterStore};
pub use tape::{Mode, NodeId, Tape};
pub use tensor::Tensor;
