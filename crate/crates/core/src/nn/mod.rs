//! Dense tensors and the layers of a small residual CNN, with hand-written
//! backward passes.
//!
//! All layer math is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod residual;
pub mod tensor;

pub mod gradcheck;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, Mode};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{conv2d_backward, conv2d_forward};
pub use loss::{cross_entropy, softmax};
pub use checkpoint::Checkpoint;
pub use network::{Network, NetworkCache, NetworkConfig, TensorKind};
pub use optim::{sgd_momentum_step, Parameters};
pub use optim::OptimizerState;
pub use residual::{residual_block_backward, residual_block_forward, BlockKind, BlockSpec, ResidualBlock};
pub use tensor::{Scalar, Tensor};
