//! Edge-aware two-phase image deblurring.
//!
//! Phase 1 trains an edge network (VGG stages with side outputs) on blurry
//! images against Canny edges of the sharp originals, optionally with a
//! patch discriminator. Phase 2 trains a deblurring network that consumes
//! the blurry image concatenated with the predicted edge map.
//!
//! Tensors are `[N,C,H,W]`. Images are stored in `[0,1]`; the deblurring
//! network sees RGB in `[-1,1]` and the edge channel in `[0,1]`.

// Parameter checks are written `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blur;
pub mod canny;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod scene;
pub mod trainer;

pub use eadnet_tensor as tensor;
pub use error::{CheckpointError, Error, Result};

use eadnet_tensor::Tensor;

/// One training example: sharp image, its blurred version (both `[3,H,W]`
/// in `[0,1]`) and the binary ground-truth edge map `[1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub clear: Tensor<f32>,
    pub blurry: Tensor<f32>,
    pub edge: Tensor<f32>,
}
