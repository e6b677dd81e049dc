//! Tiered GAN training engine.
//!
//! A small dense tensor core with tape-based reverse-mode differentiation
//! backs a set of convolutional generator/discriminator architectures. On top
//! of that sit the alternating adversarial trainer, the multi-tier dataset
//! cascade (coarse block-constant tiers refined stage by stage), and the
//! file formats used by the `tiergan` command line tool.
//!
//! Training runs in `f32`; every kernel is generic over [`Scalar`] so the
//! gradient checker can replay the same code path in `f64`.

pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod loss;
pub mod losslog;
pub mod model;
pub mod noise;
pub mod optim;
mod par;
pub mod scalar;
pub mod tensor;
pub mod tiers;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Primitive};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Whether kernels were compiled with the rayon backend.
pub const PARALLEL: bool = cfg!(feature = "parallel");
