//! Sparse 2D/3D convolution engine and a pillar-based multi-scale 3D detector
//! built on it.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: coordinate-indexed sparse tensors with a hash index.
//! * [`conv`]: kernel geometry, rulebooks and the dense reference convolution.
//! * [`autograd`]: tape-based reverse mode over every differentiable operation.
//! * [`encoding`]: point ingestion, voxelization and pillar encoders.
//! * [`network`]: residual blocks, backbone, fusion, neck, head and decoding.
//! * [`train`]: synthetic scenes, targets, loss, optimizer, gradient checks,
//!   toy training and evaluation.

pub mod autograd;
pub mod config;
pub mod conv;
pub mod encoding;
pub mod error;
pub mod grid;
pub mod matrix;
pub mod network;
pub mod nn;
pub mod real;
pub mod rng;
pub mod sample;
pub mod store;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, NormMode, SparseVar, Tape, Var};
pub use error::{Error, Result};
pub use grid::GridConfig;
pub use matrix::Matrix;
pub use real::Real;
pub use store::{ParamId, ParamStore};
pub use tensor::{Coord, DenseArray, Layout, SparseTensor};
