//! LiDAR-inertial SLAM library with a built-in raycasting simulator.
//!
//! The library is organized around the stages of a scan-to-map SLAM pipeline:
//!
//! - [`geom`] — rigid-body poses, SE(3) exp/log, timed interpolation
//! - [`scan`] — the LiDAR sweep data type shared by every stage
//! - [`sim`] — synthetic worlds, LiDAR/IMU generation, dataset export
//! - [`deskew`] — IMU pre-integration and motion-distortion correction
//! - [`features`] — curvature-based edge/planar feature extraction
//! - [`nn`] — exact k-d tree nearest-neighbor search
//! - [`scan_match`] — point-to-line / point-to-plane Gauss-Newton alignment
//! - [`psf`] — local-square particle filter localization
//! - [`loopnet`] — polar descriptors and the learned loop-closure heads
//! - [`pose_graph`] — Levenberg-Marquardt factor-graph backend
//! - [`pipeline`] — orchestration, dataset I/O, configuration, metrics
//!
//! Geometry and the numeric kernels are generic over the scalar type (any
//! [`scalar::Real`], i.e. `f32` or `f64`) and default to `f64`, which is what
//! the pipeline and all on-disk formats use.

pub mod deskew;
pub mod features;
pub mod geom;
pub mod loopnet;
pub mod nn;
pub mod pipeline;
pub mod pose_graph;
pub mod psf;
pub mod scalar;
pub mod scan;
pub mod scan_match;
pub mod sim;

pub use geom::{Pose2D, PoseSE3, TimedPose, Twist};
pub use scalar::Real;
pub use scan::{Scan, ScanPoint};
