//! The LiDAR sweep measurement shared by every pipeline stage.

use nalgebra::Vector3;

use crate::scalar::Real;

/// One return of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint<T: Real = f64> {
    pub position: Vector3<T>,
    /// Reflectance in `[0, 1]`; the simulator emits a constant.
    pub intensity: f64,
    /// Ring (channel) id for mechanical sensors, 0 for solid-state.
    pub ring: u16,
    /// Firing time relative to the sweep start, seconds in `[0, period]`.
    pub time_offset: f64,
}

/// One LiDAR sweep: the sweep-start stamp plus per-point returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan<T: Real = f64> {
    /// Sweep start time, seconds.
    pub stamp: f64,
    pub points: Vec<ScanPoint<T>>,
    /// Set once motion-distortion correction has run.
    pub deskewed: bool,
}

impl<T: Real> Scan<T> {
    pub fn new(stamp: f64) -> Self {
        Self {
            stamp,
            points: Vec::new(),
            deskewed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest firing-time offset in the sweep (0 for an empty scan).
    pub fn duration(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.time_offset)
            .fold(0.0, f64::max)
    }

    /// All coordinates finite and per-ring time offsets non-decreasing.
    pub fn validate(&self) -> bool {
        if !self
            .points
            .iter()
            .all(|p| p.position.iter().all(|c| c.is_finite()))
        {
            return false;
        }
        let mut last_per_ring: std::collections::HashMap<u16, f64> = Default::default();
        for p in &self.points {
            let last = last_per_ring.entry(p.ring).or_insert(f64::NEG_INFINITY);
            if p.time_offset < *last {
                return false;
            }
            *last = p.time_offset;
        }
        true
    }
}
