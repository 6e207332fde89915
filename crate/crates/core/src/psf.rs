//! Local-square particle filter: uniform initialization in a small square
//! around the last pose, motion prediction, map-likelihood weighting,
//! multinomial resampling, and the fixed-step localization cycle.
//!
//! Weights are kept in natural log scale and normalized by log-sum-exp, so
//! the filter tolerates extremely peaked likelihoods without underflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::FeatureCloud;
use crate::geom::Pose2D;
use crate::scalar::{real, to_f64, Real};
use crate::scan::Scan;
use crate::scan_match::{match_scan_to_map, LocalMap, MatchParams, MatchResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsfError {
    /// Every particle saw only saturated residuals: the set no longer
    /// explains the scan. Carries the last usable estimate `(x, y, yaw)`.
    #[error("localization lost; last estimate ({}, {}, {})", last_estimate.0, last_estimate.1, last_estimate.2)]
    LocalizationLost { last_estimate: (f64, f64, f64) },
    #[error("operation requires a normalized particle set")]
    NotNormalized,
    #[error("empty particle set")]
    Empty,
}

/// One weighted pose hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle<T: Real = f64> {
    pub pose: Pose2D<T>,
    /// Natural-log weight.
    pub log_weight: f64,
}

/// The weighted hypothesis set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<T: Real = f64> {
    particles: Vec<Particle<T>>,
    normalized: bool,
}

impl<T: Real> ParticleSet<T> {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle<T>] {
        &self.particles
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Sum of linear-scale weights (1 when normalized).
    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.log_weight.exp()).sum()
    }

    /// Build a set from explicit weighted particles; weights are normalized.
    pub fn from_weighted(particles: Vec<Particle<T>>) -> Self {
        let mut set = Self {
            particles,
            normalized: false,
        };
        set.normalize();
        set
    }

    fn normalize(&mut self) {
        let max = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let log_z = max
            + self
                .particles
                .iter()
                .map(|p| (p.log_weight - max).exp())
                .sum::<f64>()
                .ln();
        for p in &mut self.particles {
            p.log_weight -= log_z;
        }
        self.normalized = true;
    }
}

/// Proposal style for the localization cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    /// Plain motion-model importance function.
    MotionModel,
    /// Motion-model proposal with a final scan-match refinement of the
    /// cycle estimate.
    ScanMatchRefined,
}

/// Particle initialization and cycle configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub mode: ProposalMode,
    /// Side length of the initialization square, meters.
    pub square_side: f64,
    pub particle_count: usize,
    pub steps_per_cycle: usize,
}

impl ProposalConfig {
    /// Indoor preset: 1 cm square.
    pub fn indoor() -> Self {
        Self {
            mode: ProposalMode::ScanMatchRefined,
            square_side: 0.01,
            particle_count: 500,
            steps_per_cycle: 10,
        }
    }

    /// Outdoor preset: 10 cm square.
    pub fn outdoor() -> Self {
        Self {
            square_side: 0.10,
            ..Self::indoor()
        }
    }
}

/// Relative motion input with its process-noise sigmas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionIncrement<T: Real = f64> {
    /// Motion in the previous body frame.
    pub delta: Pose2D<T>,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_yaw: f64,
}

impl<T: Real> MotionIncrement<T> {
    pub fn exact(delta: Pose2D<T>) -> Self {
        Self {
            delta,
            sigma_x: 0.0,
            sigma_y: 0.0,
            sigma_yaw: 0.0,
        }
    }
}

/// Sensor model for particle weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodModel {
    /// Residual kernel width, meters.
    pub sigma: f64,
    /// Every stride-th scan point is evaluated.
    pub stride: usize,
    /// Height and attitude used to lift planar particles to SE(3), taken
    /// from the latest scan-match result.
    pub lift_z: f64,
    pub lift_roll: f64,
    pub lift_pitch: f64,
    /// Points whose nearest map planar is farther than this saturate.
    pub max_match_dist: f64,
}

impl Default for LikelihoodModel {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            stride: 10,
            lift_z: 0.0,
            lift_roll: 0.0,
            lift_pitch: 0.0,
            max_match_dist: 1.0,
        }
    }
}

/// Half-range of the yaw spread at initialization (2 degrees).
pub const INIT_YAW_HALF_RANGE: f64 = 2.0 * std::f64::consts::PI / 180.0;

/// Uniform particles over the configured square centered at `center`;
/// yaw uniform within +/-2 degrees of the center yaw; uniform weights.
pub fn init_particles<T: Real>(
    center: &Pose2D<T>,
    cfg: &ProposalConfig,
    seed: u64,
) -> ParticleSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.square_side / 2.0;
    let log_w = -(cfg.particle_count as f64).ln();
    let particles = (0..cfg.particle_count)
        .map(|_| {
            let dx: f64 = rng.gen_range(-half..=half);
            let dy: f64 = rng.gen_range(-half..=half);
            let dyaw: f64 = rng.gen_range(-INIT_YAW_HALF_RANGE..=INIT_YAW_HALF_RANGE);
            Particle {
                pose: Pose2D::new(
                    center.x + real(dx),
                    center.y + real(dy),
                    center.yaw() + real(dyaw),
                ),
                log_weight: log_w,
            }
        })
        .collect();
    ParticleSet {
        particles,
        normalized: true,
    }
}

/// Propagate every particle through the motion model with sampled noise.
/// Weights are unchanged.
pub fn predict<T: Real>(ps: &mut ParticleSet<T>, u: &MotionIncrement<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for p in &mut ps.particles {
        let ex = if u.sigma_x > 0.0 {
            normal.sample(&mut rng) * u.sigma_x
        } else {
            0.0
        };
        let ey = if u.sigma_y > 0.0 {
            normal.sample(&mut rng) * u.sigma_y
        } else {
            0.0
        };
        let eyaw = if u.sigma_yaw > 0.0 {
            normal.sample(&mut rng) * u.sigma_yaw
        } else {
            0.0
        };
        let noisy = Pose2D::new(
            u.delta.x + real(ex),
            u.delta.y + real(ey),
            u.delta.yaw() + real(eyaw),
        );
        p.pose = p.pose.compose(&noisy);
    }
}

/// Mean squared point-to-plane residual of every stride-th scan point against
/// the map, for a particle lifted to SE(3). Returns `(E, all_saturated)`.
pub fn mean_squared_map_residual<T: Real>(
    scan: &Scan<T>,
    map: &LocalMap<T>,
    model: &LikelihoodModel,
    pose: &Pose2D<T>,
) -> (f64, bool) {
    let lift = pose.to_se3_with(
        real(model.lift_z),
        real(model.lift_roll),
        real(model.lift_pitch),
    );
    let saturation = 3.0 * model.sigma;
    let gate2 = real::<T>(model.max_match_dist * model.max_match_dist);
    let stride = model.stride.max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut saturated = 0usize;
    let mut i = 0;
    while i < scan.points.len() {
        let q = lift.transform_point(&scan.points[i].position);
        let (r, sat) = plane_residual_or_saturate(map, &q, gate2, saturation);
        if sat {
            saturated += 1;
        }
        sum += r * r;
        count += 1;
        i += stride;
    }
    if count == 0 {
        return (saturation * saturation, true);
    }
    (sum / count as f64, saturated == count)
}

fn plane_residual_or_saturate<T: Real>(
    map: &LocalMap<T>,
    q: &nalgebra::Vector3<T>,
    gate2: T,
    saturation: f64,
) -> (f64, bool) {
    let nn = map.planar_index.nearest_k(q, 3);
    if nn.len() < 3 || nn[0].1 > gate2 {
        return (saturation, true);
    }
    let (p1, p2, p3) = (
        map.planar_points[nn[0].0],
        map.planar_points[nn[1].0],
        map.planar_points[nn[2].0],
    );
    let cross = (p2 - p1).cross(&(p3 - p1));
    let norm = cross.norm();
    if norm < real(1e-9) {
        return (saturation, true);
    }
    let normal = cross / norm;
    let r = to_f64(normal.dot(&(q - p1))).abs().min(saturation);
    (r, false)
}

/// Multiply weights by the scan likelihood `exp(-E / (2 sigma^2))` per
/// particle, then renormalize. Fails with localization-lost when every
/// particle saturates on every evaluated point.
pub fn weight<T: Real>(
    ps: &mut ParticleSet<T>,
    scan: &Scan<T>,
    map: &LocalMap<T>,
    model: &LikelihoodModel,
) -> Result<(), PsfError> {
    if ps.is_empty() {
        return Err(PsfError::Empty);
    }
    let two_sigma2 = 2.0 * model.sigma * model.sigma;
    let evals: Vec<(f64, bool)> = ps
        .particles
        .par_iter()
        .map(|p| mean_squared_map_residual(scan, map, model, &p.pose))
        .collect();
    if evals.iter().all(|(_, lost)| *lost) {
        let est = estimate_unchecked(ps);
        return Err(PsfError::LocalizationLost {
            last_estimate: (to_f64(est.x), to_f64(est.y), to_f64(est.yaw())),
        });
    }
    for (p, (e, _)) in ps.particles.iter_mut().zip(&evals) {
        p.log_weight += -e / two_sigma2;
    }
    ps.normalize();
    Ok(())
}

/// Effective sample size `1 / sum(w_i^2)` of a normalized set.
pub fn effective_sample_size<T: Real>(ps: &ParticleSet<T>) -> Result<f64, PsfError> {
    if !ps.normalized {
        return Err(PsfError::NotNormalized);
    }
    let sum_sq: f64 = ps
        .particles
        .iter()
        .map(|p| (2.0 * p.log_weight).exp())
        .sum();
    Ok(1.0 / sum_sq)
}

/// Draw `m` particles independently with probability proportional to weight;
/// weights reset to uniform.
pub fn multinomial_resample<T: Real>(ps: &mut ParticleSet<T>, seed: u64) -> Result<(), PsfError> {
    if !ps.normalized {
        return Err(PsfError::NotNormalized);
    }
    if ps.is_empty() {
        return Err(PsfError::Empty);
    }
    let m = ps.particles.len();
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for p in &ps.particles {
        acc += p.log_weight.exp();
        cumulative.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_w = -(m as f64).ln();
    let picked: Vec<Particle<T>> = (0..m)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..total);
            let idx = cumulative.partition_point(|c| *c <= u).min(m - 1);
            Particle {
                pose: ps.particles[idx].pose,
                log_weight: log_w,
            }
        })
        .collect();
    ps.particles = picked;
    ps.normalized = true;
    Ok(())
}

fn estimate_unchecked<T: Real>(ps: &ParticleSet<T>) -> Pose2D<T> {
    let mut x = 0.0;
    let mut y = 0.0;
    let mut sin = 0.0;
    let mut cos = 0.0;
    for p in &ps.particles {
        let w = p.log_weight.exp();
        x += w * to_f64(p.pose.x);
        y += w * to_f64(p.pose.y);
        sin += w * to_f64(p.pose.yaw()).sin();
        cos += w * to_f64(p.pose.yaw()).cos();
    }
    let sum: f64 = ps.particles.iter().map(|p| p.log_weight.exp()).sum();
    Pose2D::new(real(x / sum), real(y / sum), real(sin.atan2(cos)))
}

/// Weighted mean of the belief: arithmetic in x/y, circular in yaw.
pub fn estimate<T: Real>(ps: &ParticleSet<T>) -> Result<Pose2D<T>, PsfError> {
    if ps.is_empty() {
        return Err(PsfError::Empty);
    }
    if !ps.normalized {
        return Err(PsfError::NotNormalized);
    }
    Ok(estimate_unchecked(ps))
}

/// Outcome of one localization cycle.
#[derive(Debug, Clone)]
pub struct CycleResult<T: Real = f64> {
    pub estimate: Pose2D<T>,
    /// Present when the proposal mode refined the estimate by scan matching.
    pub refined: Option<MatchResult<T>>,
    pub ess_min: f64,
    pub resamples: usize,
}

impl<T: Real> CycleResult<T> {
    /// One-line diagnostics record for cycle `index`.
    pub fn diagnostics_line(&self, index: usize) -> String {
        format!(
            "cycle={} ess_min={} resamples={} est={} {} {}",
            index,
            self.ess_min,
            self.resamples,
            to_f64(self.estimate.x),
            to_f64(self.estimate.y),
            to_f64(self.estimate.yaw())
        )
    }
}

fn cycle_seed(seed: u64, step: u64, role: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(role)
}

/// Run one localization cycle over `steps` scan/motion pairs.
///
/// Particles initialize uniformly in the configured square at `start`; each
/// step predicts, weights, and resamples when the effective sample size drops
/// below half the particle count. With [`ProposalMode::ScanMatchRefined`] and
/// `refine` features supplied, the final estimate is polished by one
/// scan-to-map match seeded at the particle mean.
#[allow(clippy::too_many_arguments)]
pub fn localize_cycle<T: Real>(
    steps: &[(Scan<T>, MotionIncrement<T>)],
    start: &Pose2D<T>,
    map: &LocalMap<T>,
    cfg: &ProposalConfig,
    model: &LikelihoodModel,
    seed: u64,
    refine: Option<&FeatureCloud<T>>,
    match_params: &MatchParams,
) -> Result<CycleResult<T>, PsfError> {
    let mut ps = init_particles(start, cfg, cycle_seed(seed, 0, 0));
    let mut ess_min = ps.len() as f64;
    let mut resamples = 0usize;
    for (k, (scan, u)) in steps.iter().enumerate() {
        predict(&mut ps, u, cycle_seed(seed, k as u64 + 1, 1));
        weight(&mut ps, scan, map, model)?;
        let ess = effective_sample_size(&ps)?;
        ess_min = ess_min.min(ess);
        if ess < ps.len() as f64 / 2.0 {
            multinomial_resample(&mut ps, cycle_seed(seed, k as u64 + 1, 2))?;
            resamples += 1;
        }
    }
    let mut est = estimate(&ps)?;
    let mut refined = None;
    if cfg.mode == ProposalMode::ScanMatchRefined {
        if let Some(features) = refine {
            let lifted = est.to_se3_with(
                real(model.lift_z),
                real(model.lift_roll),
                real(model.lift_pitch),
            );
            if let Ok(result) = match_scan_to_map(features, map, &lifted, match_params) {
                if result.converged && !result.degenerate {
                    est = Pose2D::from_se3(&result.pose);
                    refined = Some(result);
                }
            }
        }
    }
    Ok(CycleResult {
        estimate: est,
        refined,
        ess_min,
        resamples,
    })
}
