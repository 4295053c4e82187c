//! Anchor-free dense object detection: ground-truth map encoding, masked
//! multi-task L2 training with online hard-negative mining, landmark
//! heatmaps with a refine branch, and image-pyramid inference with NMS.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod groundtruth;
pub mod image_io;
pub mod inference;
pub mod net;
pub mod runner;
pub mod sampling;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Param, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = net::Model<f64>;
pub type Model32 = net::Model<f32>;
