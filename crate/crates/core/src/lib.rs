//! Semantic segmentation of LiDAR point clouds through 2-channel range images
//! and a U-Net style encoder-decoder.
//!
//! The pipeline: [`projection`] bins a point cloud into a depth/elevation
//! range image with a validity mask, [`model`] runs the encoder-decoder on
//! it, [`loss`] provides the masked boundary-weighted cross-entropy and IoU
//! metrics, [`train`] drives optimization, and [`data`] handles the file
//! formats, synthetic scenes and batching.

pub mod data;
pub mod error;
mod io_util;
pub mod loss;
pub mod model;
pub mod projection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
