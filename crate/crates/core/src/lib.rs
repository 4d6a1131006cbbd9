//! Tiny vision-transformer lab: a deterministic tape autodiff core, a ViT
//! with optional low-rank (latent) attention projections and multi-CLS
//! readout, CIFAR-10 ingestion, augmentation, AdamW/Lion, and a training loop
//! with in-process data parallelism and phase profiling.

pub mod augment;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod data;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Activation, Scalar, Tensor};
