//! Keyframe bookkeeping and local-map assembly.

use nalgebra::Vector3;
use std::collections::BTreeMap;

use crate::features::FeatureCloud;
use crate::geom::PoseSE3;
use crate::loopnet::ScanDescriptor;
use crate::nn::KdIndex;
use crate::scan_match::LocalMap;

/// A retained scan: pose estimate, its features, and its loop descriptor.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub stamp: f64,
    pub pose: PoseSE3<f64>,
    pub features: FeatureCloud<f64>,
    pub descriptor: ScanDescriptor,
}

/// Ordered keyframes with dense ids.
#[derive(Debug, Clone, Default)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
}

impl KeyframeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.get(id)
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    pub fn poses(&self) -> Vec<PoseSE3<f64>> {
        self.keyframes.iter().map(|k| k.pose).collect()
    }

    pub fn set_pose(&mut self, id: usize, pose: PoseSE3<f64>) {
        self.keyframes[id].pose = pose;
    }

    /// Insertion policy: far enough (translation or rotation) from the last
    /// keyframe. An empty store always accepts.
    pub fn should_insert(&self, pose: &PoseSE3<f64>, min_translation: f64, min_rotation_deg: f64) -> bool {
        match self.keyframes.last() {
            None => true,
            Some(kf) => {
                let rel = kf.pose.between(pose);
                rel.translation.norm() >= min_translation
                    || rel.rotation_angle().to_degrees() >= min_rotation_deg
            }
        }
    }

    /// Append a keyframe; returns its id.
    pub fn insert(
        &mut self,
        stamp: f64,
        pose: PoseSE3<f64>,
        features: FeatureCloud<f64>,
        descriptor: ScanDescriptor,
    ) -> usize {
        let id = self.keyframes.len();
        self.keyframes.push(Keyframe {
            id,
            stamp,
            pose,
            features,
            descriptor,
        });
        id
    }

    /// Ids of keyframes within `radius` of `position`.
    pub fn within_radius(&self, position: &Vector3<f64>, radius: f64) -> Vec<usize> {
        if self.keyframes.is_empty() {
            return Vec::new();
        }
        let index = KdIndex::build(
            self.keyframes.iter().map(|k| k.pose.translation).collect(),
        )
        .expect("keyframe positions are finite");
        index
            .radius(position, radius)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    /// Union of the feature clouds of the given keyframes, transformed by
    /// their poses and voxel-downsampled.
    pub fn build_map(
        &self,
        ids: &[usize],
        voxel_edge: f64,
        voxel_planar: f64,
    ) -> Option<LocalMap<f64>> {
        if ids.is_empty() {
            return None;
        }
        let mut edges = Vec::new();
        let mut planars = Vec::new();
        let mut stamp: f64 = 0.0;
        for &id in ids {
            let kf = self.keyframes.get(id)?;
            stamp = stamp.max(kf.stamp);
            for p in &kf.features.edges {
                edges.push(kf.pose.transform_point(p));
            }
            for p in &kf.features.planars {
                planars.push(kf.pose.transform_point(p));
            }
        }
        let edges = voxel_downsample(&edges, voxel_edge);
        let planars = voxel_downsample(&planars, voxel_planar);
        LocalMap::new(edges, planars, stamp).ok()
    }

    /// Map of all keyframes within `radius` of `position`.
    pub fn update_local_map(
        &self,
        position: &Vector3<f64>,
        radius: f64,
        voxel_edge: f64,
        voxel_planar: f64,
    ) -> Option<LocalMap<f64>> {
        let mut ids = self.within_radius(position, radius);
        ids.sort_unstable();
        self.build_map(&ids, voxel_edge, voxel_planar)
    }
}

/// Voxel-grid downsampling: one centroid per occupied voxel. Output order is
/// deterministic (sorted by voxel key).
pub fn voxel_downsample(points: &[Vector3<f64>], edge: f64) -> Vec<Vector3<f64>> {
    if edge <= 0.0 {
        return points.to_vec();
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / edge).floor() as i64,
            (p.y / edge).floor() as i64,
            (p.z / edge).floor() as i64,
        );
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    cells
        .into_values()
        .map(|(sum, n)| sum / n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureCloud;

    fn dummy_features(points: &[(f64, f64, f64)]) -> FeatureCloud<f64> {
        let mut f = FeatureCloud::empty(0.0);
        for (i, (x, y, z)) in points.iter().enumerate() {
            f.planars.push(Vector3::new(*x, *y, *z));
            f.planar_indices.push(i);
        }
        f
    }

    fn dummy_descriptor() -> ScanDescriptor {
        ScanDescriptor::empty(4, 6, 10.0)
    }

    #[test]
    fn voxel_downsample_takes_centroids() {
        let pts = vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.03, 0.03, 0.03),
            Vector3::new(1.5, 0.0, 0.0),
        ];
        let out = voxel_downsample(&pts, 0.2);
        assert_eq!(out.len(), 2);
        assert!((out[0] - Vector3::new(0.02, 0.02, 0.02)).norm() < 1e-12);
        assert!((out[1] - Vector3::new(1.5, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn insertion_policy_thresholds() {
        let mut store = KeyframeStore::new();
        assert!(store.should_insert(&PoseSE3::identity(), 1.0, 10.0));
        store.insert(
            0.0,
            PoseSE3::identity(),
            dummy_features(&[(1.0, 0.0, 0.0)]),
            dummy_descriptor(),
        );
        let near = PoseSE3::from_translation(Vector3::new(0.5, 0.0, 0.0));
        assert!(!store.should_insert(&near, 1.0, 10.0));
        let far = PoseSE3::from_translation(Vector3::new(1.2, 0.0, 0.0));
        assert!(store.should_insert(&far, 1.0, 10.0));
        let turned = PoseSE3::from_yaw(11f64.to_radians());
        assert!(store.should_insert(&turned, 1.0, 10.0));
    }

    #[test]
    fn local_map_transforms_and_filters_by_radius() {
        let mut store = KeyframeStore::new();
        store.insert(
            0.0,
            PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            dummy_features(&[(0.0, 0.0, 0.0), (0.5, 0.0, 0.0)]),
            dummy_descriptor(),
        );
        store.insert(
            1.0,
            PoseSE3::from_translation(Vector3::new(100.0, 0.0, 0.0)),
            dummy_features(&[(0.0, 0.0, 0.0)]),
            dummy_descriptor(),
        );
        let map = store
            .update_local_map(&Vector3::new(0.0, 0.0, 0.0), 50.0, 0.1, 0.1)
            .unwrap();
        // Only the first keyframe contributes; its points land at x=1.0, 1.5.
        assert_eq!(map.planar_points.len(), 2);
        assert!((map.planar_points[0].x - 1.0).abs() < 1e-12);
        assert!((map.planar_points[1].x - 1.5).abs() < 1e-12);
    }
}
