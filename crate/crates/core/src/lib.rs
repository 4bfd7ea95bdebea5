//! Drone propeller keypoint detection and 6DoF pose recovery.
//!
//! Pipeline stages:
//!
//! 1. [`synth`] generates synthetic sequences (trajectory, projection, raster, noise).
//! 2. [`keyhead`] is a small transformer encoder with a gated-sum keypoint head.
//! 3. [`losses`] holds the pose-adaptive Mahalanobis loss and its baselines.
//! 4. [`trainer`] runs the deterministic Adam training loop and inference.
//! 5. [`pose3d`] recovers 6DoF poses from keypoints (PnP + rotation assembly).
//! 6. [`tracking`] smooths the per-frame poses with a Kalman filter.
//! 7. [`metrics`] computes OKS statistics and pose errors.

pub mod cli;
pub mod datamodel;
pub mod geometry;
pub mod gradcheck;
pub mod keyhead;
pub mod losses;
pub mod metrics;
pub mod pose3d;
pub mod synth;
pub mod tracking;
pub mod trainer;

pub use datamodel::{
    CameraIntrinsics, DatasetMeta, FrameRecord, Keypoints2D, ObjectModel3D, Pose6DoF,
    SequenceDataset, NUM_KEYPOINTS,
};
