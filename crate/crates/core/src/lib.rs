//! LiDAR point cloud semantic segmentation with point-plane projections.
//!
//! The pipeline processes raw LiDAR scans end to end: geometric
//! preprocessing (voxel downsampling, field-of-view cropping, k-nearest
//! neighbors), five 2D projections of the cloud (polar grid, the three
//! Cartesian planes, and a spherical range image), a small
//! reverse-mode-differentiable network core that alternates plane-space
//! and channel-space mixing blocks, a combined cross-entropy +
//! Lovász-Softmax objective, mIoU evaluation, and a geometry-aware
//! instance-pasting augmentation that resamples objects to match beam
//! density at their new distance.

// `!(x > 0.0)` deliberately rejects NaN where `x <= 0.0` would accept it;
// indexed loops are the clearest form for the dense numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod kdtree;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod projection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
