//! Rigid-body geometry: SE(3) poses, tangent-space twists, planar poses,
//! and time-stamped pose interpolation.
//!
//! Conventions, pinned for reproducible file output:
//! - quaternions are Hamilton, scalar-first `(w, x, y, z)`;
//! - poses are passive transforms mapping sensor-frame points into the world
//!   frame: `p_world = R * p_sensor + t`;
//! - quaternions are renormalized after every composition.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scalar::{real, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    /// `se3_log` of a rotation at (or numerically indistinguishable from) pi.
    #[error("rotation angle {angle} is within {margin} of pi; log is not defined there")]
    RotationNearPi { angle: f64, margin: f64 },
    /// Interpolation time outside the bracketing stamps.
    #[error("time {t} outside interpolation range [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },
}

/// Margin below pi at which `se3_log` refuses to operate.
const LOG_PI_MARGIN: f64 = 1e-6;

/// Rigid transform in 3D: rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3<T: Real = f64> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for PoseSE3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> PoseSE3<T> {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Build from quaternion components `(w, x, y, z)` and a translation.
    pub fn from_wxyz(w: T, x: T, y: T, z: T, translation: Vector3<T>) -> Self {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        Self {
            rotation: UnitQuaternion::new_normalize(q),
            translation,
        }
    }

    /// Pure rotation about z.
    pub fn from_yaw(yaw: T) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// `self` applied after `other`: the result maps a point through `other`
    /// first, then through `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        Self {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Relative pose taking `self`'s frame to `other`'s frame.
    pub fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn rotation_angle(&self) -> T {
        self.rotation.angle()
    }

    /// Lossy cast between scalar representations.
    pub fn cast<U: Real>(&self) -> PoseSE3<U> {
        let q = self.rotation.as_ref();
        PoseSE3::from_wxyz(
            real(crate::scalar::to_f64(q.w)),
            real(crate::scalar::to_f64(q.i)),
            real(crate::scalar::to_f64(q.j)),
            real(crate::scalar::to_f64(q.k)),
            Vector3::new(
                real(crate::scalar::to_f64(self.translation.x)),
                real(crate::scalar::to_f64(self.translation.y)),
                real(crate::scalar::to_f64(self.translation.z)),
            ),
        )
    }
}

/// Tangent-space parameterization of SE(3): rotation and translation parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist<T: Real = f64> {
    pub angular: Vector3<T>,
    pub linear: Vector3<T>,
}

impl<T: Real> Twist<T> {
    pub fn zero() -> Self {
        Self {
            angular: Vector3::zeros(),
            linear: Vector3::zeros(),
        }
    }

    pub fn new(angular: Vector3<T>, linear: Vector3<T>) -> Self {
        Self { angular, linear }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            angular: self.angular * s,
            linear: self.linear * s,
        }
    }

    pub fn norm(&self) -> T {
        (self.angular.norm_squared() + self.linear.norm_squared()).sqrt()
    }
}

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Left Jacobian of SO(3) at rotation vector `omega`.
pub fn so3_left_jacobian<T: Real>(omega: &Vector3<T>) -> Matrix3<T> {
    let theta = omega.norm();
    let w = hat(omega);
    if theta < real(1e-4) {
        let t2 = theta * theta;
        let a = real::<T>(0.5) - t2 * real(1.0 / 24.0);
        let b = real::<T>(1.0 / 6.0) - t2 * real(1.0 / 120.0);
        Matrix3::identity() + w * a + w * w * b
    } else {
        let t2 = theta * theta;
        let a = (T::one() - theta.cos()) / t2;
        let b = (theta - theta.sin()) / (t2 * theta);
        Matrix3::identity() + w * a + w * w * b
    }
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inv<T: Real>(omega: &Vector3<T>) -> Matrix3<T> {
    let theta = omega.norm();
    let w = hat(omega);
    let c = if theta < real(1e-4) {
        let t2 = theta * theta;
        real::<T>(1.0 / 12.0) + t2 * real(1.0 / 720.0)
    } else {
        let t2 = theta * theta;
        T::one() / t2 - (T::one() + theta.cos()) / (real::<T>(2.0) * theta * theta.sin())
    };
    Matrix3::identity() - w * real::<T>(0.5) + w * w * c
}

/// Adjoint of a pose acting on twists in `[angular, linear]` order.
pub fn se3_adjoint<T: Real>(p: &PoseSE3<T>) -> nalgebra::Matrix6<T> {
    let r = p.rotation.to_rotation_matrix();
    let tr = hat(&p.translation) * r.matrix();
    let mut out = nalgebra::Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(r.matrix());
    out
}

/// Coupling block of the SE(3) left Jacobian (the `Q` matrix).
fn se3_q_matrix<T: Real>(rho: &Vector3<T>, phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let rx = hat(rho);
    let px = hat(phi);
    let (c1, c2, c3) = if theta < real(1e-4) {
        let t2 = theta * theta;
        (
            real::<T>(1.0 / 6.0) - t2 * real(1.0 / 120.0),
            real::<T>(-1.0 / 24.0) + t2 * real(1.0 / 720.0),
            real::<T>(-1.0 / 120.0),
        )
    } else {
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t3 * theta;
        let t5 = t4 * theta;
        let a = (theta - theta.sin()) / t3;
        let b = (T::one() - t2 * real(0.5) - theta.cos()) / t4;
        let e = (theta - theta.sin() - t3 * real(1.0 / 6.0)) / t5;
        (a, b, (b - e * real(3.0)) * real(0.5))
    };
    let pr: Matrix3<T> = px * rx;
    let rp: Matrix3<T> = rx * px;
    let prp: Matrix3<T> = px * rx * px;
    let term1: Matrix3<T> = (pr + rp + prp) * c1;
    let term2: Matrix3<T> = (px * pr + rp * px - prp * real::<T>(3.0)) * c2;
    let term3: Matrix3<T> = (prp * px + px * px * rx * px) * c3;
    rx * real::<T>(0.5) + term1 - term2 - term3
}

/// Inverse of the SE(3) left Jacobian, `[angular, linear]` twist order.
pub fn se3_left_jacobian_inv<T: Real>(t: &Twist<T>) -> nalgebra::Matrix6<T> {
    let j3_inv = so3_left_jacobian_inv(&t.angular);
    let q = se3_q_matrix(&t.linear, &t.angular);
    let coupling = -j3_inv * q * j3_inv;
    let mut out = nalgebra::Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j3_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&coupling);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j3_inv);
    out
}

/// Inverse of the SE(3) right Jacobian: `Jr^-1(t) = Jl^-1(-t)`.
pub fn se3_right_jacobian_inv<T: Real>(t: &Twist<T>) -> nalgebra::Matrix6<T> {
    se3_left_jacobian_inv(&Twist {
        angular: -t.angular,
        linear: -t.linear,
    })
}

/// SE(3) exponential map.
pub fn se3_exp<T: Real>(t: &Twist<T>) -> PoseSE3<T> {
    let rotation = UnitQuaternion::from_scaled_axis(t.angular);
    let translation = so3_left_jacobian(&t.angular) * t.linear;
    PoseSE3 {
        rotation,
        translation,
    }
}

/// SE(3) logarithm. Fails for rotations within [`LOG_PI_MARGIN`] of pi,
/// where the axis is not recoverable.
pub fn se3_log<T: Real>(p: &PoseSE3<T>) -> Result<Twist<T>, GeomError> {
    let angle = p.rotation.angle();
    if angle >= T::pi() - real(LOG_PI_MARGIN) {
        return Err(GeomError::RotationNearPi {
            angle: crate::scalar::to_f64(angle),
            margin: LOG_PI_MARGIN,
        });
    }
    let omega = p.rotation.scaled_axis();
    let linear = so3_left_jacobian_inv(&omega) * p.translation;
    Ok(Twist {
        angular: omega,
        linear,
    })
}

/// A pose with a timestamp, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose<T: Real = f64> {
    pub stamp: f64,
    pub pose: PoseSE3<T>,
}

impl<T: Real> TimedPose<T> {
    pub fn new(stamp: f64, pose: PoseSE3<T>) -> Self {
        Self { stamp, pose }
    }
}

/// Geodesic interpolation between two timed poses.
///
/// Returns `a.pose * exp(s * log(a.pose^-1 * b.pose))` with
/// `s = (t - a.stamp) / (b.stamp - a.stamp)`.
pub fn interpolate<T: Real>(
    a: &TimedPose<T>,
    b: &TimedPose<T>,
    t: f64,
) -> Result<PoseSE3<T>, GeomError> {
    if t < a.stamp || t > b.stamp || a.stamp >= b.stamp {
        return Err(GeomError::TimeOutOfRange {
            t,
            start: a.stamp,
            end: b.stamp,
        });
    }
    let s = (t - a.stamp) / (b.stamp - a.stamp);
    let rel = a.pose.between(&b.pose);
    let twist = se3_log(&rel)?;
    Ok(a.pose.compose(&se3_exp(&twist.scaled(real(s)))))
}

/// Planar pose `(x, y, yaw)`; yaw is always kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2D<T: Real = f64> {
    pub x: T,
    pub y: T,
    yaw: T,
}

impl<T: Real> Default for Pose2D<T> {
    fn default() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }
}

impl<T: Real> Pose2D<T> {
    pub fn new(x: T, y: T, yaw: T) -> Self {
        Self {
            x,
            y,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn yaw(&self) -> T {
        self.yaw
    }

    pub fn set_yaw(&mut self, yaw: T) {
        self.yaw = normalize_yaw(yaw);
    }

    /// Apply `delta` in this pose's body frame.
    pub fn compose(&self, delta: &Self) -> Self {
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        Self::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.yaw + delta.yaw,
        )
    }

    /// Relative motion taking `self` to `other`, expressed in `self`'s frame.
    pub fn between(&self, other: &Self) -> Self {
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Self::new(c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)
    }

    /// Lift to SE(3) with the given height and attitude (z-y-x Euler order).
    pub fn to_se3_with(&self, z: T, roll: T, pitch: T) -> PoseSE3<T> {
        PoseSE3 {
            rotation: UnitQuaternion::from_euler_angles(roll, pitch, self.yaw),
            translation: Vector3::new(self.x, self.y, z),
        }
    }

    /// Lift to SE(3) on the z = 0 plane.
    pub fn to_se3(&self) -> PoseSE3<T> {
        self.to_se3_with(T::zero(), T::zero(), T::zero())
    }

    /// Planar projection of an SE(3) pose: `(x, y, yaw)`.
    pub fn from_se3(p: &PoseSE3<T>) -> Self {
        let (_, _, yaw) = p.rotation.euler_angles();
        Self::new(p.translation.x, p.translation.y, yaw)
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_yaw<T: Real>(yaw: T) -> T {
    let two_pi = T::two_pi();
    let mut m = yaw - two_pi * (yaw / two_pi).floor();
    if m > T::pi() {
        m -= two_pi;
    }
    m
}
