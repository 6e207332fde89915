//! Trajectory accuracy metrics against ground truth.

use nalgebra::{Matrix3, Vector3};

use super::PipelineError;
use crate::geom::{PoseSE3, TimedPose};

/// Accuracy summary of an estimated trajectory.
#[derive(Debug, Clone)]
pub struct Metrics {
    /// Absolute trajectory error after rigid SE(3) alignment, meters RMS.
    pub ate_rmse: f64,
    /// Relative pose error: translation drift per meter travelled.
    pub rpe_translation: f64,
    /// Relative pose error: rotation drift, degrees per meter.
    pub rpe_rotation_deg: f64,
    /// Per-pose translation errors after alignment.
    pub per_pose_errors: Vec<f64>,
    pub associated_pairs: usize,
    /// The alignment applied to the estimate (rotation + translation).
    pub alignment: PoseSE3<f64>,
}

/// Associate estimate and ground truth by nearest stamp within `max_dt`.
fn associate(
    est: &[TimedPose<f64>],
    gt: &[TimedPose<f64>],
    max_dt: f64,
) -> Vec<(PoseSE3<f64>, PoseSE3<f64>)> {
    let mut out = Vec::new();
    let mut j = 0usize;
    for e in est {
        while j + 1 < gt.len()
            && (gt[j + 1].stamp - e.stamp).abs() <= (gt[j].stamp - e.stamp).abs()
        {
            j += 1;
        }
        if (gt[j].stamp - e.stamp).abs() <= max_dt {
            out.push((e.pose, gt[j].pose));
        }
    }
    out
}

/// Rigid alignment (rotation + translation, no scale) mapping `est` points
/// onto `gt` points in the least-squares sense.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> PoseSE3<f64> {
    assert_eq!(est.len(), gt.len());
    let n = est.len() as f64;
    let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::<f64>::zeros();
    for (e, g) in est.iter().zip(gt) {
        w += (g - mu_g) * (e - mu_e).transpose();
    }
    let svd = w.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    let translation = mu_g - r * mu_e;
    PoseSE3 {
        rotation,
        translation,
    }
}

/// ATE and RPE of an estimated trajectory against ground truth.
///
/// Poses are associated by nearest stamp within 0.05 s; ATE uses rigid
/// Umeyama alignment; RPE is evaluated over consecutive non-overlapping
/// segments of at least 1 m ground-truth path length.
pub fn evaluate(
    est: &[TimedPose<f64>],
    gt: &[TimedPose<f64>],
) -> Result<Metrics, PipelineError> {
    evaluate_with(est, gt, true)
}

/// As [`evaluate`], optionally skipping the alignment (identity alignment).
pub fn evaluate_with(
    est: &[TimedPose<f64>],
    gt: &[TimedPose<f64>],
    align: bool,
) -> Result<Metrics, PipelineError> {
    let pairs = associate(est, gt, 0.05);
    if pairs.len() < 2 {
        return Err(PipelineError::TooFewAssociations { found: pairs.len() });
    }
    let est_pts: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.translation).collect();
    let gt_pts: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.translation).collect();
    let alignment = if align {
        umeyama_align(&est_pts, &gt_pts)
    } else {
        PoseSE3::identity()
    };

    let per_pose_errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (alignment.transform_point(&e.translation) - g.translation).norm())
        .collect();
    let ate_rmse = (per_pose_errors.iter().map(|e| e * e).sum::<f64>()
        / per_pose_errors.len() as f64)
        .sqrt();

    // RPE over >= 1 m ground-truth deltas.
    let mut rpe_t = Vec::new();
    let mut rpe_r = Vec::new();
    let mut i = 0usize;
    while i + 1 < pairs.len() {
        let mut dist = 0.0;
        let mut j = i + 1;
        while j < pairs.len() {
            dist += (pairs[j].1.translation - pairs[j - 1].1.translation).norm();
            if dist >= 1.0 {
                break;
            }
            j += 1;
        }
        if j >= pairs.len() {
            break;
        }
        let rel_est = pairs[i].0.between(&pairs[j].0);
        let rel_gt = pairs[i].1.between(&pairs[j].1);
        let err = rel_gt.between(&rel_est);
        rpe_t.push(err.translation.norm() / dist);
        rpe_r.push(err.rotation_angle().to_degrees() / dist);
        i = j;
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };

    Ok(Metrics {
        ate_rmse,
        rpe_translation: mean(&rpe_t),
        rpe_rotation_deg: mean(&rpe_r),
        per_pose_errors,
        associated_pairs: pairs.len(),
        alignment,
    })
}
