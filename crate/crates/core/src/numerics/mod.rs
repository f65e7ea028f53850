//! Tensors, reverse-mode differentiation, attention, loss and optimiser.

pub mod gradcheck;
pub mod memory;
pub mod optim;
pub mod tensor;
pub mod var;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use memory::{AttentionKind, AttentionSite, Recorder};
pub use optim::{adam_step, lr_at, AdamConfig, OptimizerState};
pub use tensor::{softmax, Element, Tensor};
pub use var::{attention, cross_entropy_smoothed, Bound, GradStore, Gradients, Var};
