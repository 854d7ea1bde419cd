//! Trajectory-based road autolabeling from lidar scan rings and camera
//! patch features.
//!
//! The pipeline fits the driven trajectory to each lidar scan ring
//! ([`trajectory`]), scores ring points by height and thresholded gradients
//! relative to the trajectory ([`lidar_label`]), scores image patches by
//! cosine similarity to a trajectory prototype ([`camera_label`]), fuses both
//! and refines the result with a dense CRF ([`fusion`], [`crf`]).
//! [`synth`] generates parametric winter-road scenes with ground truth and
//! [`metrics`] scores masks against it.

pub mod camera_label;
pub mod config;
pub mod crf;
pub mod error;
pub mod exec;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod ingest;
pub mod lidar_label;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod trajectory;

pub use config::{CrfParams, SequenceConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::{Calibration, LidarPoint, Pixel, Pose, RigidTransform, RingScan, Vec3};
pub use grid::{LabelImage, Mask};
