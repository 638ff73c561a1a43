//! Desk-scale LiDAR semantic segmentation toolkit.
//!
//! * [`sparse_conv`]: submanifold sparse convolutions, the sparse depthwise
//!   separable block, cost accounting and reverse-mode gradients.
//! * [`strfd`]: redundancy-aware frame downsampling driven by SSIM.
//! * [`reflec`]: distance-normalized reflectivity and its multi-resolution
//!   histogram features.
//! * [`pseudo`]: entropy-partitioned pseudo-labels, the per-class negative
//!   memory bank and the voxel-level InfoNCE loss.
//! * [`teacher`]: mean-teacher training: EMA, supervised/consistency losses and
//!   the three-stage toy pipeline.
//!
//! [`pc_io`], [`voxel`] and [`synth`] provide frames, voxelization and synthetic data.

pub mod backbone;
pub mod error;
pub mod image;
pub mod pc_io;
pub mod pseudo;
pub mod reflec;
pub mod sparse_conv;
pub mod strfd;
pub mod synth;
pub mod teacher;
pub mod voxel;

pub use error::{Error, Result};
