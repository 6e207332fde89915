//! Candidate search over historical keyframes and geometric verification.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{regress_yaw, shift_profile, LoopError, LoopModel, ScanDescriptor, TrainingPair};
use crate::features::FeatureCloud;
use crate::geom::{normalize_yaw, Pose2D, PoseSE3};
use crate::scan_match::{match_scan_to_map, LocalMap, MatchParams};

/// A possible loop closure between two keyframes.
#[derive(Debug, Clone)]
pub struct LoopCandidate {
    /// Newer keyframe.
    pub query: usize,
    /// Older keyframe revisited.
    pub matched: usize,
    pub probability: f64,
    /// Regressed `yaw(query) - yaw(matched)`, radians.
    pub relative_yaw: f64,
    /// Relative pose `T_matched^-1 * T_query` once verified.
    pub verified_relative: Option<PoseSE3<f64>>,
    /// Mean squared residual of the verification match, m^2.
    pub verification_residual: f64,
}

/// Evaluate profiles between every keyframe pair at index distance at least
/// `gate` and return candidates above `threshold`, ordered by
/// `(query, matched)`.
pub fn find_loops(
    descriptors: &[ScanDescriptor],
    model: &LoopModel,
    gate: usize,
    threshold: f64,
) -> Result<Vec<LoopCandidate>, LoopError> {
    if !model.trained {
        return Err(LoopError::UntrainedModel);
    }
    let queries: Vec<usize> = (0..descriptors.len()).collect();
    let nested: Vec<Vec<LoopCandidate>> = queries
        .par_iter()
        .map(|&q| {
            let mut found = Vec::new();
            for m in 0..q {
                if q - m < gate {
                    continue;
                }
                let Ok(profile) = shift_profile(&descriptors[q], &descriptors[m]) else {
                    continue;
                };
                let p = model.forward(&profile);
                if p >= threshold {
                    found.push(LoopCandidate {
                        query: q,
                        matched: m,
                        probability: p,
                        relative_yaw: regress_yaw(&profile, model.temperature),
                        verified_relative: None,
                        verification_residual: f64::INFINITY,
                    });
                }
            }
            found
        })
        .collect();
    Ok(nested.into_iter().flatten().collect())
}

/// Verification parameters.
#[derive(Debug, Clone)]
pub struct VerifyParams {
    /// Keyframes on each side of the match included in the submap.
    pub half_window: usize,
    /// Acceptance bound on the mean squared match residual, m^2.
    pub max_mean_squared_residual: f64,
    pub match_params: MatchParams,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            half_window: 10,
            max_mean_squared_residual: 0.05 * 0.05,
            match_params: MatchParams::default(),
        }
    }
}

/// Geometric verification: build a submap around the matched keyframe, run a
/// scan-to-map match of the query features seeded by the regressed yaw and
/// the matched keyframe position, and accept on convergence below the
/// residual gate. Rejection leaves `verified_relative` empty.
pub fn verify_candidate(
    candidate: &LoopCandidate,
    poses: &[PoseSE3<f64>],
    features: &[FeatureCloud<f64>],
    build_submap: impl Fn(&[usize]) -> Option<LocalMap<f64>>,
    params: &VerifyParams,
) -> LoopCandidate {
    let mut out = candidate.clone();
    let (q, m) = (candidate.query, candidate.matched);
    if q >= poses.len() || m >= poses.len() {
        return out;
    }
    let lo = m.saturating_sub(params.half_window);
    let hi = (m + params.half_window).min(poses.len() - 1);
    let ids: Vec<usize> = (lo..=hi).collect();
    let Some(submap) = build_submap(&ids) else {
        return out;
    };

    let matched_pose = &poses[m];
    let (_, _, matched_yaw) = matched_pose.rotation.euler_angles();
    let guess_yaw = normalize_yaw(matched_yaw + candidate.relative_yaw);
    let guess = Pose2D::new(
        matched_pose.translation.x,
        matched_pose.translation.y,
        guess_yaw,
    )
    .to_se3_with(matched_pose.translation.z, 0.0, 0.0);

    let Ok(result) = match_scan_to_map(&features[q], &submap, &guess, &params.match_params) else {
        return out;
    };
    out.verification_residual = result.mean_squared_residual;
    if result.converged
        && !result.degenerate
        && result.mean_squared_residual < params.max_mean_squared_residual
    {
        out.verified_relative = Some(matched_pose.between(&result.pose));
    }
    out
}

/// Build balanced labeled pairs from ground truth.
///
/// Overlap label: ground-truth planar distance below `positive_dist` (the
/// descriptor discs always intersect at that range). Negatives are sampled
/// from beyond `negative_dist` to stay unambiguous. The yaw label is the
/// ground-truth relative yaw `yaw(query) - yaw(matched)`.
pub fn label_pairs(
    descriptors: &[ScanDescriptor],
    poses: &[PoseSE3<f64>],
    min_index_gap: usize,
    positive_dist: f64,
    negative_dist: f64,
    max_per_class: usize,
    seed: u64,
) -> Vec<TrainingPair> {
    assert_eq!(descriptors.len(), poses.len());
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for q in 0..poses.len() {
        for m in 0..q {
            if q - m < min_index_gap {
                continue;
            }
            let dq = &poses[q].translation;
            let dm = &poses[m].translation;
            let dist = (dq.xy() - dm.xy()).norm();
            if dist < positive_dist {
                positives.push((q, m));
            } else if dist > negative_dist {
                negatives.push((q, m));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);
    let count = positives.len().min(negatives.len()).min(max_per_class);
    positives.truncate(count);
    negatives.truncate(count);

    let mut out = Vec::with_capacity(2 * count);
    for (label, list) in [(true, positives), (false, negatives)] {
        for (q, m) in list {
            let Ok(profile) = shift_profile(&descriptors[q], &descriptors[m]) else {
                continue;
            };
            let (_, _, yq) = poses[q].rotation.euler_angles();
            let (_, _, ym) = poses[m].rotation.euler_angles();
            out.push(TrainingPair {
                profile,
                overlap: label,
                yaw: normalize_yaw(yq - ym),
            });
        }
    }
    out
}

/// Identity-rotation pose at a position, used by tests and labeling helpers.
pub(crate) fn _pose_at(x: f64, y: f64, z: f64, yaw: f64) -> PoseSE3<f64> {
    PoseSE3::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        Vector3::new(x, y, z),
    )
}
