//! Language-model-guided affordance detection on 3D point clouds.
//!
//! A PointNet++-style encoder produces per-point features, a stack of
//! transformer blocks with inserted cross-attention fuses them with a
//! one-word affordance query, and a small decoder scores every point.
//! Everything runs on a tape-based autograd in [`autograd`].

pub mod aqm;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ply;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Graph, Var};
pub use tensor::{DType, Element, Tensor, TensorError};
