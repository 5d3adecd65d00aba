//! Memory-augmented semantic segmentation at desk scale.
//!
//! The crate is organized around a small double-precision tensor library
//! with reverse-mode differentiation ([`tensor`], [`graph`]), the memory
//! bank with cosine-addressed read and argmax-partitioned write ([`memory`]),
//! an encoder/decoder segmentation model hosting the bank ([`model`]), a
//! procedural illumination-shifted scene generator ([`scenes`], [`dataset`]),
//! an SGD training harness with poly LR schedule and checkpointing
//! ([`optim`], [`augment`], [`train`], [`checkpoint`], [`config`]), and
//! mIoU evaluation plus ablation sweeps ([`eval`]).

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
