//! Scan-to-map matching: Gauss-Newton alignment of a feature cloud against a
//! local map using point-to-line and point-to-plane distances.

use nalgebra::{Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::features::FeatureCloud;
use crate::geom::{se3_exp, PoseSE3, Twist};
use crate::nn::{KdIndex, NnError};
use crate::scalar::{real, to_f64, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("only {found} correspondences at the guess, need at least {needed}")]
    TooFewCorrespondences { found: usize, needed: usize },
    #[error(transparent)]
    Index(#[from] NnError),
}

/// Feature map the current scan is matched against.
#[derive(Debug, Clone)]
pub struct LocalMap<T: Real = f64> {
    pub edge_points: Vec<Vector3<T>>,
    pub planar_points: Vec<Vector3<T>>,
    pub edge_index: KdIndex<T>,
    pub planar_index: KdIndex<T>,
    /// Stamp of the newest keyframe that contributed.
    pub stamp: f64,
}

impl<T: Real> LocalMap<T> {
    pub fn new(
        edge_points: Vec<Vector3<T>>,
        planar_points: Vec<Vector3<T>>,
        stamp: f64,
    ) -> Result<Self, NnError> {
        let edge_index = KdIndex::build(edge_points.clone())?;
        let planar_index = KdIndex::build(planar_points.clone())?;
        Ok(Self {
            edge_points,
            planar_points,
            edge_index,
            planar_index,
            stamp,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.edge_points.is_empty() && self.planar_points.is_empty()
    }
}

/// Matching parameters; distances in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub max_correspondence_dist: f64,
    pub edge_pair_max_separation: f64,
    pub plane_fit_tolerance: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub min_correspondences: usize,
    pub condition_limit: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            max_correspondence_dist: 1.0,
            edge_pair_max_separation: 1.0,
            plane_fit_tolerance: 0.02,
            huber_delta: 0.1,
            max_iterations: 30,
            update_tolerance: 1e-5,
            min_correspondences: 10,
            condition_limit: 1e8,
        }
    }
}

/// Alignment outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T: Real = f64> {
    pub pose: PoseSE3<T>,
    /// Mean squared correspondence residual at the final pose, m^2.
    pub mean_squared_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Normal-system condition number exceeded the limit.
    pub degenerate: bool,
    /// Correspondences with |residual| within the Huber width at the end.
    pub inliers: usize,
    /// Robust cost after each accepted iteration.
    pub cost_trace: Vec<f64>,
}

/// Signed distance from `p` to the plane `n . x = d`.
pub fn point_to_plane_residual<T: Real>(p: &Vector3<T>, normal: &Vector3<T>, offset: T) -> T {
    normal.dot(p) - offset
}

/// Distance from `p` to the line through `a` with unit direction `u`.
pub fn point_to_line_residual<T: Real>(p: &Vector3<T>, a: &Vector3<T>, u: &Vector3<T>) -> T {
    (p - a).cross(u).norm()
}

/// One feature-to-map pairing; geometry is in map coordinates, the feature
/// point stays in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Correspondence<T: Real = f64> {
    Edge {
        point: Vector3<T>,
        anchor: Vector3<T>,
        direction: Vector3<T>,
    },
    Plane {
        point: Vector3<T>,
        normal: Vector3<T>,
        offset: T,
    },
}

impl<T: Real> Correspondence<T> {
    fn residual(&self, pose: &PoseSE3<T>) -> T {
        match self {
            Self::Edge {
                point,
                anchor,
                direction,
            } => point_to_line_residual(&pose.transform_point(point), anchor, direction),
            Self::Plane {
                point,
                normal,
                offset,
            } => point_to_plane_residual(&pose.transform_point(point), normal, *offset),
        }
    }

    /// Residual and its Jacobian with respect to a right-multiplied twist.
    fn linearize(&self, pose: &PoseSE3<T>) -> (T, Vector6<T>) {
        let (point, dr_dq) = match self {
            Self::Edge {
                point,
                anchor,
                direction,
            } => {
                let q = pose.transform_point(point);
                let v = (q - anchor).cross(direction);
                let norm = v.norm();
                if norm < real(1e-12) {
                    return (T::zero(), Vector6::zeros());
                }
                // d|v|/dq for v = (q - a) x u equals u x (v / |v|).
                (point, direction.cross(&(v / norm)))
            }
            Self::Plane { point, normal, .. } => (point, *normal),
        };
        let r = self.residual(pose);
        let rot = pose.rotation.to_rotation_matrix();
        let d_trans = rot.matrix().transpose() * dr_dq;
        let d_rot = point.cross(&d_trans);
        let mut jac = Vector6::zeros();
        // Twist layout: [angular, linear] to match se3_exp.
        jac.fixed_rows_mut::<3>(0).copy_from(&d_rot);
        jac.fixed_rows_mut::<3>(3).copy_from(&d_trans);
        (r, jac)
    }
}

/// Pair each feature (transformed by `guess`) with map geometry.
///
/// Edges use the line through their 2 nearest map edge points; planars use
/// the plane fit to their 3 nearest map planar points. Pairings beyond the
/// distance gates (or with degenerate geometry) are dropped.
pub fn associate<T: Real>(
    features: &FeatureCloud<T>,
    map: &LocalMap<T>,
    guess: &PoseSE3<T>,
    params: &MatchParams,
) -> Vec<Correspondence<T>> {
    let max_d2 = real::<T>(params.max_correspondence_dist * params.max_correspondence_dist);
    let max_sep2 = real::<T>(params.edge_pair_max_separation * params.edge_pair_max_separation);
    let fit_tol = real::<T>(params.plane_fit_tolerance);
    let mut out = Vec::with_capacity(features.edges.len() + features.planars.len());

    for point in &features.edges {
        let q = guess.transform_point(point);
        let nn = map.edge_index.nearest_k(&q, 2);
        if nn.len() < 2 || nn[0].1 > max_d2 {
            continue;
        }
        let a = map.edge_points[nn[0].0];
        let b = map.edge_points[nn[1].0];
        let sep2 = (b - a).norm_squared();
        if sep2 > max_sep2 || sep2 < real(1e-12) {
            continue;
        }
        out.push(Correspondence::Edge {
            point: *point,
            anchor: a,
            direction: (b - a).normalize(),
        });
    }

    for point in &features.planars {
        let q = guess.transform_point(point);
        let nn = map.planar_index.nearest_k(&q, 3);
        if nn.len() < 3 || nn[0].1 > max_d2 {
            continue;
        }
        let (p1, p2, p3) = (
            map.planar_points[nn[0].0],
            map.planar_points[nn[1].0],
            map.planar_points[nn[2].0],
        );
        let cross = (p2 - p1).cross(&(p3 - p1));
        let norm = cross.norm();
        if norm < real(1e-9) {
            continue;
        }
        let normal = cross / norm;
        let offset = normal.dot(&p1);
        let fit = [p1, p2, p3]
            .iter()
            .map(|p| (normal.dot(p) - offset).abs())
            .fold(T::zero(), |acc, d| if d > acc { d } else { acc });
        if fit > fit_tol {
            continue;
        }
        out.push(Correspondence::Plane {
            point: *point,
            normal,
            offset,
        });
    }
    out
}

fn huber_cost<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        r * r * real(0.5)
    } else {
        delta * a - delta * delta * real(0.5)
    }
}

fn robust_cost<T: Real>(corrs: &[Correspondence<T>], pose: &PoseSE3<T>, delta: T) -> T {
    corrs
        .iter()
        .map(|c| huber_cost(c.residual(pose), delta))
        .fold(T::zero(), |a, b| a + b)
}

/// Gauss-Newton scan-to-map alignment with re-association each iteration.
pub fn match_scan_to_map<T: Real>(
    features: &FeatureCloud<T>,
    map: &LocalMap<T>,
    guess: &PoseSE3<T>,
    params: &MatchParams,
) -> Result<MatchResult<T>, MatchError> {
    let delta = real::<T>(params.huber_delta);
    let mut pose = *guess;
    let mut corrs = associate(features, map, &pose, params);
    if corrs.len() < params.min_correspondences {
        return Err(MatchError::TooFewCorrespondences {
            found: corrs.len(),
            needed: params.min_correspondences,
        });
    }

    let mut converged = false;
    let mut degenerate = false;
    let mut iterations = 0;
    let mut cost_trace = Vec::new();

    for _ in 0..params.max_iterations {
        iterations += 1;
        if iterations > 1 {
            corrs = associate(features, map, &pose, params);
            if corrs.len() < params.min_correspondences {
                break;
            }
        }

        let mut h = Matrix6::<T>::zeros();
        let mut g = Vector6::<T>::zeros();
        for c in &corrs {
            let (r, jac) = c.linearize(&pose);
            let w = if r.abs() <= delta {
                T::one()
            } else {
                delta / r.abs()
            };
            h += jac * jac.transpose() * w;
            g += jac * (r * w);
        }

        let eig = h.symmetric_eigenvalues();
        let (mut lo, mut hi) = (T::max_value().unwrap(), T::zero());
        for i in 0..6 {
            if eig[i] < lo {
                lo = eig[i];
            }
            if eig[i] > hi {
                hi = eig[i];
            }
        }
        if lo <= T::zero() || to_f64(hi / lo) > params.condition_limit {
            degenerate = true;
            break;
        }

        let step = match h.cholesky() {
            Some(ch) => ch.solve(&(-g)),
            None => {
                degenerate = true;
                break;
            }
        };

        // Step halving keeps the robust cost non-increasing.
        let cost_before = robust_cost(&corrs, &pose, delta);
        let mut accepted = None;
        let mut scale = T::one();
        for _ in 0..5 {
            let scaled = step * scale;
            let twist = Twist::new(
                Vector3::new(scaled[0], scaled[1], scaled[2]),
                Vector3::new(scaled[3], scaled[4], scaled[5]),
            );
            let candidate = pose.compose(&se3_exp(&twist));
            if robust_cost(&corrs, &candidate, delta) <= cost_before {
                accepted = Some((candidate, scaled.norm()));
                break;
            }
            scale *= real(0.5);
        }
        let Some((next, step_norm)) = accepted else {
            break;
        };
        pose = next;
        cost_trace.push(to_f64(robust_cost(&corrs, &pose, delta)));
        if to_f64(step_norm) < params.update_tolerance {
            converged = true;
            break;
        }
    }

    let final_corrs = associate(features, map, &pose, params);
    let (mut sum_sq, mut inliers) = (0.0, 0usize);
    for c in &final_corrs {
        let r = to_f64(c.residual(&pose));
        sum_sq += r * r;
        if r.abs() <= params.huber_delta {
            inliers += 1;
        }
    }
    let n = final_corrs.len().max(1);
    Ok(MatchResult {
        pose,
        mean_squared_residual: sum_sq / n as f64,
        iterations,
        converged,
        degenerate,
        inliers,
        cost_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::sim::{raycast_scan, Aabb, ScanPattern, WorldSpec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_residual_trivials() {
        let z = Vector3::new(0.0, 0.0, 1.0);
        assert_relative_eq!(
            point_to_plane_residual(&Vector3::new(0.0, 0.0, 1.0), &z, 0.0),
            1.0
        );
        assert_relative_eq!(
            point_to_plane_residual(&Vector3::new(3.0, -2.0, 0.0), &z, 0.0),
            0.0
        );
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(
            point_to_plane_residual(&Vector3::new(1.0, 2.0, 3.0), &x, 0.5),
            0.5
        );
    }

    #[test]
    fn line_residual_trivials() {
        let origin = Vector3::zeros();
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(
            point_to_line_residual(&Vector3::new(5.0, 0.0, 0.0), &origin, &x),
            0.0
        );
        assert_relative_eq!(
            point_to_line_residual(&Vector3::new(0.0, 1.0, 0.0), &origin, &x),
            1.0
        );
    }

    #[test]
    fn line_residual_matches_dense_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let u = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let p = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let mut best = f64::INFINITY;
            let mut t = -20.0;
            while t <= 20.0 {
                best = best.min((p - (a + u * t)).norm());
                t += 1e-3;
            }
            assert!((point_to_line_residual(&p, &a, &u) - best).abs() < 1e-6);
        }
    }

    fn room_world() -> WorldSpec {
        WorldSpec {
            boxes: vec![
                Aabb::from_corners(-5.5, -5.5, -2.0, 5.5, -5.0, 4.0),
                Aabb::from_corners(-5.5, 5.0, -2.0, 5.5, 5.5, 4.0),
                Aabb::from_corners(-5.5, -5.5, -2.0, -5.0, 5.5, 4.0),
                Aabb::from_corners(5.0, -5.5, -2.0, 5.5, 5.5, 4.0),
                Aabb::from_corners(1.0, -2.0, -2.0, 2.5, -0.5, 4.0),
            ],
            // The floor constrains z, roll, and pitch.
            ground: true,
        }
    }

    fn room_map_and_features() -> (LocalMap, FeatureCloud<f64>, PoseSE3) {
        let truth = PoseSE3::from_translation(Vector3::new(0.3, -0.4, 1.1));
        let mut scan = raycast_scan(
            &room_world(),
            |_| truth,
            0.0,
            &ScanPattern::mechanical_default(),
            0.0,
            11,
        )
        .unwrap();
        scan.deskewed = true;
        let features = extract_features(&scan).unwrap();
        let edges_w: Vec<Vector3<f64>> = features
            .edges
            .iter()
            .map(|p| truth.transform_point(p))
            .collect();
        let planars_w: Vec<Vector3<f64>> = features
            .planars
            .iter()
            .map(|p| truth.transform_point(p))
            .collect();
        let map = LocalMap::new(edges_w, planars_w, 0.0).unwrap();
        (map, features, truth)
    }

    #[test]
    fn self_association_has_zero_residuals() {
        let (map, features, truth) = room_map_and_features();
        let corrs = associate(&features, &map, &truth, &MatchParams::default());
        assert!(corrs.len() >= features.planars.len() / 2);
        for c in &corrs {
            assert!(c.residual(&truth).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_map_associates_nothing() {
        let (_, features, truth) = room_map_and_features();
        let map = LocalMap::new(Vec::new(), Vec::new(), 0.0).unwrap();
        assert!(associate(&features, &map, &truth, &MatchParams::default()).is_empty());
    }

    #[test]
    fn offset_guess_still_pairs_most_planars() {
        let (map, features, truth) = room_map_and_features();
        let guess = truth.compose(&PoseSE3::from_translation(Vector3::new(0.2, 0.0, 0.0)));
        let corrs = associate(&features, &map, &guess, &MatchParams::default());
        let planar_pairs = corrs
            .iter()
            .filter(|c| matches!(c, Correspondence::Plane { .. }))
            .count();
        assert!(
            planar_pairs * 10 >= features.planars.len() * 8,
            "{planar_pairs} of {}",
            features.planars.len()
        );
    }

    #[test]
    fn self_match_returns_identity() {
        let (map, features, truth) = room_map_and_features();
        let result = match_scan_to_map(&features, &map, &truth, &MatchParams::default()).unwrap();
        assert!(result.converged);
        let drift = truth.between(&result.pose);
        assert!(drift.translation.norm() < 1e-6);
        assert!(drift.rotation_angle() < 1e-6);
        assert!(result.mean_squared_residual < 1e-12);
    }

    #[test]
    fn perturbed_guess_recovers_ground_truth() {
        let (map, features, truth) = room_map_and_features();
        let perturb = PoseSE3::new(
            nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 3.0f64.to_radians()),
            Vector3::new(0.1, 0.1, 0.0),
        );
        let guess = truth.compose(&perturb);
        let result = match_scan_to_map(&features, &map, &guess, &MatchParams::default()).unwrap();
        assert!(result.converged);
        let err = truth.between(&result.pose);
        assert!(
            err.translation.norm() < 0.01,
            "translation error {}",
            err.translation.norm()
        );
        assert!(
            err.rotation_angle().to_degrees() < 0.1,
            "rotation error {} deg",
            err.rotation_angle().to_degrees()
        );
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let (map, features, truth) = room_map_and_features();
        let guess = truth.compose(&PoseSE3::from_translation(Vector3::new(0.15, -0.1, 0.0)));
        let result = match_scan_to_map(&features, &map, &guess, &MatchParams::default()).unwrap();
        for w in result.cost_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "cost increased: {:?}",
                result.cost_trace
            );
        }
    }

    #[test]
    fn single_wall_scene_is_degenerate() {
        let world = WorldSpec {
            boxes: vec![Aabb::from_corners(4.0, -30.0, -4.0, 5.0, 30.0, 6.0)],
            ground: false,
        };
        let truth = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut scan = raycast_scan(
            &world,
            |_| truth,
            0.0,
            &ScanPattern::mechanical_default(),
            0.0,
            12,
        )
        .unwrap();
        scan.deskewed = true;
        let features = extract_features(&scan).unwrap();
        let planars_w: Vec<Vector3<f64>> = features
            .planars
            .iter()
            .map(|p| truth.transform_point(p))
            .collect();
        let map = LocalMap::new(Vec::new(), planars_w, 0.0).unwrap();
        let result = match_scan_to_map(&features, &map, &truth, &MatchParams::default()).unwrap();
        assert!(result.degenerate);
        assert!(!result.converged);
    }

    #[test]
    fn too_few_correspondences_is_an_error() {
        let (map, _, truth) = room_map_and_features();
        let features = FeatureCloud::empty(0.0);
        assert!(matches!(
            match_scan_to_map(&features, &map, &truth, &MatchParams::default()),
            Err(MatchError::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn frame_consistency() {
        let (map, features, truth) = room_map_and_features();
        let guess = truth.compose(&PoseSE3::from_translation(Vector3::new(0.05, 0.08, 0.0)));
        let r1 = match_scan_to_map(&features, &map, &guess, &MatchParams::default()).unwrap();

        // Pre-transform the features by the guess and match with identity.
        let mut pre = features.clone();
        for p in pre.edges.iter_mut().chain(pre.planars.iter_mut()) {
            *p = guess.transform_point(p);
        }
        let r2 =
            match_scan_to_map(&pre, &map, &PoseSE3::identity(), &MatchParams::default()).unwrap();
        let recombined = r2.pose.compose(&guess);
        let diff = r1.pose.between(&recombined);
        assert!(diff.translation.norm() < 1e-6, "{}", diff.translation.norm());
        assert!(diff.rotation_angle() < 1e-6);
    }
}
