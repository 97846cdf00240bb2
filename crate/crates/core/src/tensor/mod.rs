//! Reverse-mode automatic differentiation over dense tensors.

mod checkpoint;
mod conv;
mod ops;
mod param;
mod real;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv2d_output_size, ConvGeometry};
pub use param::{clamp_parameters, rmsprop_step, Parameter, RmsProp};
pub use real::Real;
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
