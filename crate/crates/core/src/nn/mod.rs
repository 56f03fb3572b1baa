//! Dense tensors with just enough reverse-mode differentiation to train the
//! highlight network: linear layers, scaled dot-product attention, sigmoid,
//! binary cross-entropy and Adam.

mod adam;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{attention, attention_on, attention_param_names, bce_loss, linear, linear_on, AttentionNodes};
pub use params::{Gradients, Param, ParamSet};
pub use tape::{sigmoid, softmax_rows, NodeId, Tape, SIGMOID_CLAMP};
pub use tensor::Tensor2;
