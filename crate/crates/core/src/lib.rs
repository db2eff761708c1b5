//! Cross-modal relational knowledge distillation for referring image
//! segmentation.
//!
//! A large teacher and a small student share one architecture: a residual
//! conv encoder and a token encoder, fused by pixel-token attention on the
//! three deepest stages and decoded by an FPN. The student learns from the
//! ground-truth mask plus two relational signals taken from the frozen
//! teacher: its pixel-token correlation matrices and the channel Gram matrices
//! of its decoder features.
//!
//! The crate is `no_std` (with `alloc`) and performs no I/O; file formats,
//! configuration and the command line live in the companion `cmkd` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod distill;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod segmenter;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Real, Tensor};
