//! IMU pre-integration and motion-distortion correction.
//!
//! A sweep's points are measured in the sensor frame at their individual
//! firing times; both entry points here re-express them in the frame at the
//! sweep start, either from an integrated IMU pose track or from a single
//! constant-velocity relative pose.

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geom::{interpolate, se3_exp, se3_log, PoseSE3, TimedPose};
use crate::scalar::{real, Real};
use crate::scan::Scan;

/// Gravity in the world frame, m/s^2.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeskewError {
    #[error("imu samples do not cover [{t0}, {t1}]")]
    SamplesDontCover { t0: f64, t1: f64 },
    #[error("imu stream has a {gap}s gap inside the integration interval (limit {limit}s)")]
    CoverageGap { gap: f64, limit: f64 },
    #[error("need at least 2 imu samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("point time {t} outside integrated interval [{t0}, {t1}]")]
    PointOutsideInterval { t: f64, t0: f64, t1: f64 },
    #[error("relative rotation {angle} rad too large for constant-velocity correction")]
    RotationTooLarge { angle: f64 },
    #[error("imu stamps not strictly increasing at index {index}")]
    NonMonotoneStamps { index: usize },
}

/// One inertial measurement: body-frame angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Relative motion over `[t0, t1]`, expressed in the sensor frame at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedSegment {
    pub t0: f64,
    pub t1: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Velocity change over the segment, start frame.
    pub velocity: Vector3<f64>,
}

/// Integrated pose samples across a sweep, relative to the frame at `t0`.
///
/// Between samples the pose is interpolated geodesically, so it can be
/// evaluated at every point firing time.
#[derive(Debug, Clone)]
pub struct ImuPoseTrack {
    poses: Vec<TimedPose<f64>>,
    velocity_delta: Vector3<f64>,
}

impl ImuPoseTrack {
    pub fn start(&self) -> f64 {
        self.poses.first().map(|p| p.stamp).unwrap_or(0.0)
    }

    pub fn end(&self) -> f64 {
        self.poses.last().map(|p| p.stamp).unwrap_or(0.0)
    }

    /// Pose of the sensor at `t` relative to the sweep-start frame.
    pub fn relative_pose_at(&self, t: f64) -> Result<PoseSE3<f64>, DeskewError> {
        let (t0, t1) = (self.start(), self.end());
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return Err(DeskewError::PointOutsideInterval { t, t0, t1 });
        }
        let t = t.clamp(t0, t1);
        let i = self
            .poses
            .partition_point(|p| p.stamp <= t)
            .clamp(1, self.poses.len() - 1);
        let (a, b) = (&self.poses[i - 1], &self.poses[i]);
        if b.stamp - a.stamp <= 0.0 {
            return Ok(a.pose);
        }
        interpolate(a, b, t.clamp(a.stamp, b.stamp))
            .map_err(|_| DeskewError::PointOutsideInterval { t, t0, t1 })
    }

    pub fn segment(&self) -> PreintegratedSegment {
        let last = self.poses.last().expect("track has at least one pose");
        PreintegratedSegment {
            t0: self.start(),
            t1: last.stamp,
            rotation: last.pose.rotation,
            translation: last.pose.translation,
            velocity: self.velocity_delta,
        }
    }
}

/// Integrate IMU samples over `[t0, t1]` into a relative pose track.
///
/// Rotation uses the midpoint rule on the gyro; gravity is added back to the
/// specific force before double integration. `initial_orientation` is the
/// world orientation of the body at `t0`, `initial_velocity` the world
/// velocity at `t0`.
pub fn preintegrate_track(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    initial_orientation: UnitQuaternion<f64>,
    initial_velocity: Vector3<f64>,
) -> Result<ImuPoseTrack, DeskewError> {
    if samples.len() < 2 {
        return Err(DeskewError::TooFewSamples { got: samples.len() });
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].stamp <= w[0].stamp {
            return Err(DeskewError::NonMonotoneStamps { index: i + 1 });
        }
    }
    if samples[0].stamp > t0 + 1e-9 || samples[samples.len() - 1].stamp < t1 - 1e-9 {
        return Err(DeskewError::SamplesDontCover { t0, t1 });
    }
    let period = (samples[samples.len() - 1].stamp - samples[0].stamp) / (samples.len() - 1) as f64;
    let gap_limit = 2.0 * period;

    let q0 = initial_orientation;
    let q0_inv = q0.inverse();
    let mut q = q0;
    let mut v = initial_velocity;
    let mut p = Vector3::zeros();
    let mut poses = vec![TimedPose::new(t0, PoseSE3::identity())];

    for w in samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let lo = a.stamp.max(t0);
        let hi = b.stamp.min(t1);
        if hi <= lo {
            continue;
        }
        if b.stamp - a.stamp > gap_limit {
            return Err(DeskewError::CoverageGap {
                gap: b.stamp - a.stamp,
                limit: gap_limit,
            });
        }
        let dt = hi - lo;
        let gyro = (a.gyro + b.gyro) * 0.5;
        let accel = (a.accel + b.accel) * 0.5;
        let q_half = q * UnitQuaternion::from_scaled_axis(gyro * (dt * 0.5));
        let a_world = q_half * accel + GRAVITY;
        p += v * dt + a_world * (0.5 * dt * dt);
        v += a_world * dt;
        q *= UnitQuaternion::from_scaled_axis(gyro * dt);
        let rel = PoseSE3 {
            rotation: q0_inv * q,
            translation: q0_inv * p,
        };
        poses.push(TimedPose::new(hi, rel));
        if hi >= t1 {
            break;
        }
    }
    Ok(ImuPoseTrack {
        poses,
        velocity_delta: q0_inv * (v - initial_velocity),
    })
}

/// Integrate IMU samples into a single relative-motion summary.
pub fn preintegrate(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    initial_orientation: UnitQuaternion<f64>,
    initial_velocity: Vector3<f64>,
) -> Result<PreintegratedSegment, DeskewError> {
    preintegrate_track(samples, t0, t1, initial_orientation, initial_velocity)
        .map(|track| track.segment())
}

/// Re-express all points of `scan` in the sensor frame at the sweep start.
///
/// `relative_pose_at` must return the sensor pose at an absolute time,
/// relative to the sweep-start frame (as [`ImuPoseTrack::relative_pose_at`]
/// does). Point count, intensities, and ring ids are preserved.
pub fn deskew_scan<T: Real>(
    scan: &Scan<T>,
    relative_pose_at: impl Fn(f64) -> Result<PoseSE3<T>, DeskewError>,
) -> Result<Scan<T>, DeskewError> {
    let mut out = scan.clone();
    for p in &mut out.points {
        let rel = relative_pose_at(scan.stamp + p.time_offset)?;
        p.position = rel.transform_point(&p.position);
    }
    out.deskewed = true;
    Ok(out)
}

/// Constant-velocity fallback when no IMU stream is configured.
///
/// `scene_motion` is the apparent relative motion of the scene in the sensor
/// frame across the whole sweep — the inverse of the sensor's ego-motion. A
/// point fired at normalized sweep time `s` is corrected by the inverse of
/// the geodesic interpolation of `scene_motion` at `s`.
pub fn deskew_constant_velocity<T: Real>(
    scan: &Scan<T>,
    scene_motion: &PoseSE3<T>,
) -> Result<Scan<T>, DeskewError> {
    let angle = crate::scalar::to_f64(scene_motion.rotation_angle());
    if angle >= std::f64::consts::FRAC_PI_2 {
        return Err(DeskewError::RotationTooLarge { angle });
    }
    let twist = se3_log(scene_motion).map_err(|_| DeskewError::RotationTooLarge { angle })?;
    let duration = scan.duration();
    let mut out = scan.clone();
    if duration > 0.0 {
        for p in &mut out.points {
            let s = real::<T>((p.time_offset / duration).clamp(0.0, 1.0));
            let correction = se3_exp(&twist.scaled(s)).inverse();
            p.position = correction.transform_point(&p.position);
        }
    }
    out.deskewed = true;
    Ok(out)
}
