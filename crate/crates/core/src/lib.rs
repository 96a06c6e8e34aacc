//! Volumetric brain-tumor segmentation with a 3D U-Net: tensors with
//! reverse-mode differentiation, the network, losses, data handling,
//! training, inference, region postprocessing and evaluation metrics.

// Float checks are written `!(x > 0.0)` on purpose so NaN is rejected too,
// and the kernels index several buffers with one loop variable.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod regions;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
