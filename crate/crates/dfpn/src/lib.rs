//! Single-shot aerial object detection on a feature pyramid that is
//! downsampled all the way to 1×1.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors with reverse-mode gradients and the handful
//!   of ops the detector needs (convolution, upsampling, activations).
//! - [`geometry`]: boxes, IoU, and the anchor/box delta encoding.
//! - [`anchors`]: anchor grids over pyramid levels and target assignment.
//! - [`model`]: backbone variants, the pyramid, and shared heads.
//! - [`loss`]: the modified focal classification loss and smooth-L1
//!   regression loss.
//! - [`inference`]: score thresholding, top-k, decoding, and NMS.
//! - [`eval`]: average precision and throughput measurement.
//! - [`data`]: synthetic scenes, drone-annotation ingestion, flips.
//! - [`train`]: the deterministic SGD loop with checkpointing.
//!
//! Start with the `examples/` directory: each file exercises one of these
//! capabilities end to end.

pub mod anchors;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
