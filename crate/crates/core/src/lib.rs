//! Point cloud upsampling with a shifted-channel transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape and a gradient checker
//! * [`geometry`]: kNN, farthest point sampling, seed patches, noise
//! * [`model`]: head, transformer encoders (positional fusion + SC-MSA) and shuffle tail
//! * [`metrics`]: Chamfer loss, CD / HD / P2F evaluation metrics, reference surfaces
//! * [`data`]: synthetic datasets, `.xyz` files, OBJ meshes and checkpoints
//! * [`pipeline`]: training, patch-based upsampling, evaluation and sweeps

pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
