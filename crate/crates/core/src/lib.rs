//! Task-oriented denoising of low-dose CT slices.
//!
//! A residual CNN denoiser is trained against a Wasserstein critic, a
//! pixel-wise MSE term and a soft-Dice loss evaluated through a frozen,
//! pretrained segmentation network. The crate contains everything needed to
//! run that experiment on synthetic data: a small reverse-mode autodiff
//! engine ([`tensor`]), a parallel-beam CT simulator ([`phantom`]), the
//! network builders, losses, training loops and the evaluation suite.

pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod phantom;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use networks::{Network, SegmenterKind};
pub use tensor::{Parameter, Real, Tape, Tensor, Var};
pub use training::{LossVariant, TrainConfig};
