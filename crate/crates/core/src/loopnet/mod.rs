//! Learning-based loop closure: rotation-equivariant polar scan descriptors,
//! an overlap classification head, a relative-yaw regression head, and
//! geometric verification of candidates.
//!
//! A descriptor is a rings x sectors matrix of maximum point heights. A yaw
//! rotation of the scene by one sector width shifts descriptor columns by
//! one, so the per-shift distance profile between two descriptors carries
//! both the overlap evidence (its minimum) and the relative angle (where the
//! minimum sits).

mod detect;
mod model;

pub use detect::{find_loops, label_pairs, verify_candidate, LoopCandidate, VerifyParams};
pub use model::{train, Classification, LoopModel, TrainOutcome, TrainingPair};

use thiserror::Error;

use crate::scan::Scan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("training set has only one class")]
    SingleClassTrainingSet,
    #[error("need at least {need} labeled pairs, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("model is not trained")]
    UntrainedModel,
    #[error("descriptor dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("model file is not a recognized loop model: {0}")]
    BadModelFile(String),
}

/// Height value marking an empty descriptor cell.
pub const SENTINEL: f64 = -10.0;

/// Polar occupancy matrix of maximum point heights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanDescriptor {
    pub rings: usize,
    pub sectors: usize,
    /// Largest planar radius binned, meters.
    pub max_radius: f64,
    values: Vec<f64>,
}

impl ScanDescriptor {
    pub const DEFAULT_RINGS: usize = 20;
    pub const DEFAULT_SECTORS: usize = 60;
    pub const DEFAULT_MAX_RADIUS: f64 = 40.0;

    pub fn empty(rings: usize, sectors: usize, max_radius: f64) -> Self {
        Self {
            rings,
            sectors,
            max_radius,
            values: vec![SENTINEL; rings * sectors],
        }
    }

    #[inline]
    pub fn at(&self, ring: usize, sector: usize) -> f64 {
        self.values[ring * self.sectors + sector]
    }

    #[inline]
    fn at_mut(&mut self, ring: usize, sector: usize) -> &mut f64 {
        &mut self.values[ring * self.sectors + sector]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn occupied_cells(&self) -> usize {
        self.values.iter().filter(|v| **v != SENTINEL).count()
    }

    /// Descriptor with columns shifted so that
    /// `shifted.at(r, (s + k) % sectors) == self.at(r, s)`.
    pub fn column_shifted(&self, k: usize) -> Self {
        let mut out = Self::empty(self.rings, self.sectors, self.max_radius);
        for r in 0..self.rings {
            for s in 0..self.sectors {
                *out.at_mut(r, (s + k) % self.sectors) = self.at(r, s);
            }
        }
        out
    }
}

/// Bin a deskewed scan into its polar descriptor (cell value = max z).
pub fn compute_descriptor(scan: &Scan<f64>) -> ScanDescriptor {
    compute_descriptor_with(
        scan,
        ScanDescriptor::DEFAULT_RINGS,
        ScanDescriptor::DEFAULT_SECTORS,
        ScanDescriptor::DEFAULT_MAX_RADIUS,
    )
}

pub fn compute_descriptor_with(
    scan: &Scan<f64>,
    rings: usize,
    sectors: usize,
    max_radius: f64,
) -> ScanDescriptor {
    let mut out = ScanDescriptor::empty(rings, sectors, max_radius);
    for p in &scan.points {
        let radius = p.position.x.hypot(p.position.y);
        if radius > max_radius {
            continue;
        }
        let ring = ((radius / max_radius * rings as f64) as usize).min(rings - 1);
        let az = p.position.y.atan2(p.position.x);
        let sector = (((az + std::f64::consts::PI) / std::f64::consts::TAU * sectors as f64)
            as usize)
            .min(sectors - 1);
        let cell = out.at_mut(ring, sector);
        if *cell == SENTINEL || p.position.z > *cell {
            *cell = p.position.z;
        }
    }
    out
}

/// Per-shift mean absolute height difference between two descriptors,
/// normalized to `[0, 1]` by the 99th-percentile height magnitude. Entries
/// with no overlapping occupied cells are 1.
pub fn shift_profile(a: &ScanDescriptor, b: &ScanDescriptor) -> Result<Vec<f64>, LoopError> {
    if a.rings != b.rings || a.sectors != b.sectors {
        return Err(LoopError::DimensionMismatch(
            a.rings, a.sectors, b.rings, b.sectors,
        ));
    }
    let mut heights: Vec<f64> = a
        .values
        .iter()
        .chain(b.values.iter())
        .filter(|v| **v != SENTINEL)
        .map(|v| v.abs())
        .collect();
    let scale = if heights.is_empty() {
        1.0
    } else {
        heights.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let idx = ((heights.len() as f64) * 0.99) as usize;
        heights[idx.min(heights.len() - 1)].max(1e-6)
    };

    let s = a.sectors;
    let mut profile = Vec::with_capacity(s);
    for k in 0..s {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..a.rings {
            for j in 0..s {
                let va = a.at(r, j);
                let vb = b.at(r, (j + k) % s);
                if va != SENTINEL && vb != SENTINEL {
                    sum += (va - vb).abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            profile.push(1.0);
        } else {
            profile.push((sum / count as f64 / scale).min(1.0));
        }
    }
    Ok(profile)
}

/// Soft-argmax of the negated profile mapped to a relative angle in
/// `(-pi, pi]`; resolution is bounded by the sector width.
pub fn regress_yaw(profile: &[f64], temperature: f64) -> f64 {
    let s = profile.len();
    let tau = temperature.max(1e-9);
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sin = 0.0;
    let mut cos = 0.0;
    for (k, v) in profile.iter().enumerate() {
        let w = (-(v - min) / tau).exp();
        let angle = std::f64::consts::TAU * k as f64 / s as f64;
        sin += w * angle.sin();
        cos += w * angle.cos();
    }
    sin.atan2(cos)
}
