//! Per-point curvature and extraction of edge (corner) and planar features.
//!
//! Curvature of point `i` over the neighborhood `N(i)` of 5 points on each
//! side along its ring:
//!
//! ```text
//! c_i = | sum_{j in N(i)} (p_j - p_i) |^2 / (|N(i)|^2 * |p_i|^2)
//! ```
//!
//! The range normalization makes `c` scale-free: a wall fold measures around
//! `4.5 * step^2` regardless of distance (about 2e-4 at 0.4 deg steps), and
//! smooth surfaces sit orders of magnitude lower. The default thresholds are
//! calibrated to that scale.

use nalgebra::Vector3;
use thiserror::Error;

use crate::scalar::{real, to_f64, Real};
use crate::scan::Scan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("ring {ring} is not azimuth-ordered near position {position}")]
    UnorderedRing { ring: u16, position: usize },
}

/// How scan points map onto scanlines for the curvature neighborhoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RingLayout {
    /// Trust the per-point ring ids and the within-ring scan order.
    FromIds,
    /// Re-group points into pseudo-rings by elevation bins (degrees) and sort
    /// each bin by azimuth; used for solid-state patterns that carry no rings.
    ElevationBins { bin_deg: f64 },
}

/// Feature-extraction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    /// Minimum curvature for edge candidates.
    pub edge_threshold: f64,
    /// Maximum curvature for planar candidates.
    pub plane_threshold: f64,
    pub sectors: usize,
    pub max_edges_per_sector: usize,
    pub max_planars_per_sector: usize,
    /// Edge non-maximum suppression half-window, in ring indices.
    pub suppression_window: usize,
    /// Range jump to a ring neighbor that marks an occluded edge, meters.
    pub occlusion_jump: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 1e-4,
            plane_threshold: 2e-5,
            sectors: 6,
            max_edges_per_sector: 2,
            max_planars_per_sector: 4,
            suppression_window: 5,
            occlusion_jump: 0.3,
        }
    }
}

/// Edge and planar feature points extracted from one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud<T: Real = f64> {
    pub edges: Vec<Vector3<T>>,
    pub planars: Vec<Vector3<T>>,
    /// Source indices into the scan, parallel to `edges` / `planars`.
    pub edge_indices: Vec<usize>,
    pub planar_indices: Vec<usize>,
    pub stamp: f64,
}

impl<T: Real> FeatureCloud<T> {
    pub fn empty(stamp: f64) -> Self {
        Self {
            edges: Vec::new(),
            planars: Vec::new(),
            edge_indices: Vec::new(),
            planar_indices: Vec::new(),
            stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.planars.is_empty()
    }
}

fn azimuth<T: Real>(p: &Vector3<T>) -> f64 {
    to_f64(p.y).atan2(to_f64(p.x))
}

/// Group scan points into scanlines of point indices.
///
/// With [`RingLayout::FromIds`] the within-ring azimuth ordering is validated
/// (one wrap across the seam is allowed); with elevation bins the points are
/// sorted into order instead.
pub fn group_rings<T: Real>(
    scan: &Scan<T>,
    layout: RingLayout,
) -> Result<Vec<Vec<usize>>, FeatureError> {
    match layout {
        RingLayout::FromIds => {
            let max_ring = scan.points.iter().map(|p| p.ring).max().unwrap_or(0) as usize;
            let mut rings: Vec<Vec<usize>> = vec![Vec::new(); max_ring + 1];
            for (i, p) in scan.points.iter().enumerate() {
                rings[p.ring as usize].push(i);
            }
            // Firing order must be intact: per-ring time offsets are
            // non-decreasing. Raw scans are additionally required to be
            // azimuth-ordered (one seam wrap allowed); corrected scans are
            // not, because deskew shifts azimuths by whatever the ego-motion
            // was worth at each point's range.
            for ring in &rings {
                for w in ring.windows(2) {
                    if scan.points[w[1]].time_offset < scan.points[w[0]].time_offset {
                        return Err(FeatureError::UnorderedRing {
                            ring: scan.points[w[0]].ring,
                            position: w[0],
                        });
                    }
                }
                if scan.deskewed {
                    continue;
                }
                let mut wraps = 0usize;
                for w in ring.windows(2) {
                    let a = azimuth(&scan.points[w[0]].position);
                    let b = azimuth(&scan.points[w[1]].position);
                    if b < a - 0.02 {
                        if b < a - std::f64::consts::PI {
                            wraps += 1;
                        } else {
                            wraps = usize::MAX;
                        }
                        if wraps > 1 {
                            return Err(FeatureError::UnorderedRing {
                                ring: scan.points[w[0]].ring,
                                position: w[0],
                            });
                        }
                    }
                }
            }
            Ok(rings)
        }
        RingLayout::ElevationBins { bin_deg } => {
            let mut bins: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
            for (i, p) in scan.points.iter().enumerate() {
                let range = to_f64(p.position.norm());
                if range < 1e-9 {
                    continue;
                }
                let el = (to_f64(p.position.z) / range).asin().to_degrees();
                bins.entry((el / bin_deg).floor() as i64).or_default().push(i);
            }
            let mut rings: Vec<Vec<usize>> = bins.into_values().collect();
            for ring in &mut rings {
                ring.sort_by(|&a, &b| {
                    azimuth(&scan.points[a].position)
                        .partial_cmp(&azimuth(&scan.points[b].position))
                        .unwrap()
                        .then(a.cmp(&b))
                });
            }
            Ok(rings)
        }
    }
}

/// Per-point curvature; `None` marks boundary points with fewer than 5
/// neighbors on a side (and points at degenerate zero range).
pub fn curvature_over_rings<T: Real>(scan: &Scan<T>, rings: &[Vec<usize>]) -> Vec<Option<T>> {
    let mut out = vec![None; scan.len()];
    for ring in rings {
        if ring.len() < 11 {
            continue;
        }
        for w in 5..ring.len() - 5 {
            let i = ring[w];
            let pi = scan.points[i].position;
            let norm2 = pi.norm_squared();
            if norm2 < real(1e-18) {
                continue;
            }
            let mut sum = Vector3::zeros();
            for j in 1..=5usize {
                sum += scan.points[ring[w - j]].position - pi;
                sum += scan.points[ring[w + j]].position - pi;
            }
            out[i] = Some(sum.norm_squared() / (real::<T>(100.0) * norm2));
        }
    }
    out
}

/// Curvature using the scan's own ring ids.
pub fn curvature<T: Real>(scan: &Scan<T>) -> Result<Vec<Option<T>>, FeatureError> {
    let rings = group_rings(scan, RingLayout::FromIds)?;
    Ok(curvature_over_rings(scan, &rings))
}

/// Extract edge and planar features.
///
/// Per ring the azimuth circle is divided into equal sectors; each sector
/// keeps up to `max_edges_per_sector` highest-curvature points above the edge
/// threshold and up to `max_planars_per_sector` lowest-curvature points below
/// the plane threshold. Neighbors within `suppression_window` ring indices of
/// a selected edge are suppressed, and points with a range jump larger than
/// `occlusion_jump` to a ring neighbor are excluded from edge selection.
pub fn extract_features_with<T: Real>(
    scan: &Scan<T>,
    layout: RingLayout,
    config: &FeatureConfig,
) -> Result<FeatureCloud<T>, FeatureError> {
    let mut cloud = FeatureCloud::empty(scan.stamp);
    if scan.is_empty() {
        return Ok(cloud);
    }
    let rings = group_rings(scan, layout)?;
    let curvatures = curvature_over_rings(scan, &rings);
    let sector_width = std::f64::consts::TAU / config.sectors as f64;

    for ring in &rings {
        // Sector membership and occlusion flags along this ring.
        let mut by_sector: Vec<Vec<usize>> = vec![Vec::new(); config.sectors];
        for (w, &i) in ring.iter().enumerate() {
            if curvatures[i].is_some() {
                let az = azimuth(&scan.points[i].position);
                let s = (((az + std::f64::consts::PI) / sector_width) as usize)
                    .min(config.sectors - 1);
                by_sector[s].push(w);
            }
        }
        let occluded: Vec<bool> = (0..ring.len())
            .map(|w| {
                let r = to_f64(scan.points[ring[w]].position.norm());
                let jump = |other: usize| {
                    (to_f64(scan.points[ring[other]].position.norm()) - r).abs()
                        > config.occlusion_jump
                };
                (w > 0 && jump(w - 1)) || (w + 1 < ring.len() && jump(w + 1))
            })
            .collect();

        let mut suppressed = vec![false; ring.len()];
        let mut is_edge = vec![false; ring.len()];
        for sector in &by_sector {
            // Edges: largest curvature first.
            let mut cands: Vec<usize> = sector.clone();
            cands.sort_by(|&a, &b| {
                let ca = curvatures[ring[a]].unwrap();
                let cb = curvatures[ring[b]].unwrap();
                cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
            });
            let mut picked = 0usize;
            for &w in &cands {
                if picked >= config.max_edges_per_sector {
                    break;
                }
                let c = to_f64(curvatures[ring[w]].unwrap());
                if c < config.edge_threshold {
                    break;
                }
                if suppressed[w] || occluded[w] {
                    continue;
                }
                is_edge[w] = true;
                picked += 1;
                let lo = w.saturating_sub(config.suppression_window);
                let hi = (w + config.suppression_window).min(ring.len() - 1);
                for s in suppressed.iter_mut().take(hi + 1).skip(lo) {
                    *s = true;
                }
            }
        }
        for sector in &by_sector {
            // Planars: smallest curvature first.
            let mut cands: Vec<usize> = sector.clone();
            cands.sort_by(|&a, &b| {
                let ca = curvatures[ring[a]].unwrap();
                let cb = curvatures[ring[b]].unwrap();
                ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
            });
            let mut picked = 0usize;
            for &w in &cands {
                if picked >= config.max_planars_per_sector {
                    break;
                }
                let c = to_f64(curvatures[ring[w]].unwrap());
                if c > config.plane_threshold {
                    break;
                }
                if is_edge[w] {
                    continue;
                }
                cloud.planars.push(scan.points[ring[w]].position);
                cloud.planar_indices.push(ring[w]);
                picked += 1;
            }
        }
        for (w, flag) in is_edge.iter().enumerate() {
            if *flag {
                cloud.edges.push(scan.points[ring[w]].position);
                cloud.edge_indices.push(ring[w]);
            }
        }
    }
    Ok(cloud)
}

/// Extract features using the scan's ring ids and default parameters.
pub fn extract_features<T: Real>(scan: &Scan<T>) -> Result<FeatureCloud<T>, FeatureError> {
    extract_features_with(scan, RingLayout::FromIds, &FeatureConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::ScanPoint;
    use crate::sim::{raycast_scan, Aabb, ScanPattern, WorldSpec};
    use crate::PoseSE3;
    use nalgebra::Vector3;

    fn scan_from_points(points: Vec<Vector3<f64>>, ring: u16) -> Scan {
        let mut scan = Scan::new(0.0);
        for (i, position) in points.into_iter().enumerate() {
            scan.points.push(ScanPoint {
                position,
                intensity: 1.0,
                ring,
                time_offset: i as f64 * 1e-4,
            });
        }
        scan.deskewed = true;
        scan
    }

    #[test]
    fn collinear_points_have_zero_curvature() {
        // 11 equally spaced points along a line at y = 2, azimuth-ascending.
        let pts: Vec<Vector3<f64>> = (0..11)
            .map(|i| Vector3::new(0.5 - 0.1 * i as f64, 2.0, 0.0))
            .collect();
        let scan = scan_from_points(pts, 0);
        let c = curvature(&scan).unwrap();
        assert!(c[5].unwrap() < 1e-12);
        assert!(c[0].is_none() && c[10].is_none(), "boundaries are invalid");
    }

    #[test]
    fn arc_curvature_matches_direct_formula() {
        // Points on a circle of radius 2 around the sensor, 1 degree apart.
        let pts: Vec<Vector3<f64>> = (0..21)
            .map(|i| {
                let a = (i as f64 - 10.0).to_radians();
                Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.0)
            })
            .collect();
        let scan = scan_from_points(pts.clone(), 0);
        let c = curvature(&scan).unwrap();
        for i in 5..16 {
            let mut sum = Vector3::zeros();
            for j in 1..=5usize {
                sum += pts[i - j] - pts[i];
                sum += pts[i + j] - pts[i];
            }
            let expected = sum.norm_squared() / (100.0 * pts[i].norm_squared());
            let got = c[i].unwrap();
            assert!((got - expected).abs() < 1e-15, "i={i} {got} vs {expected}");
            assert!(expected > 0.0);
        }
    }

    #[test]
    fn unordered_ring_is_an_error() {
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|i| {
                let a = (i as f64 * 3.0).to_radians();
                Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.0)
            })
            .collect();
        let mut scan = scan_from_points(pts, 0);
        scan.points.swap(10, 20);
        assert!(matches!(
            curvature(&scan),
            Err(FeatureError::UnorderedRing { .. })
        ));
        // A raw (not yet deskewed) scan with an azimuth inversion but intact
        // time offsets is also rejected.
        let mut raw = scan_from_points(
            (0..30)
                .map(|i| {
                    let a = (i as f64 * 3.0).to_radians();
                    Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.0)
                })
                .collect(),
            0,
        );
        raw.deskewed = false;
        let p10 = raw.points[10].position;
        raw.points[10].position = raw.points[20].position;
        raw.points[20].position = p10;
        assert!(matches!(
            curvature(&raw),
            Err(FeatureError::UnorderedRing { .. })
        ));
    }

    #[test]
    fn empty_scan_gives_empty_features() {
        let scan = Scan::<f64>::new(0.0);
        let cloud = extract_features(&scan).unwrap();
        assert!(cloud.is_empty());
    }

    fn square_room(half: f64) -> WorldSpec {
        // Walls tall enough that every ring hits a wall (no data gaps).
        WorldSpec {
            boxes: vec![
                Aabb::from_corners(-half - 0.5, -half - 0.5, -2.0, half + 0.5, -half, 4.0),
                Aabb::from_corners(-half - 0.5, half, -2.0, half + 0.5, half + 0.5, 4.0),
                Aabb::from_corners(-half - 0.5, -half - 0.5, -2.0, -half, half + 0.5, 4.0),
                Aabb::from_corners(half, -half - 0.5, -2.0, half + 0.5, half + 0.5, 4.0),
            ],
            ground: false,
        }
    }

    fn room_scan() -> Scan {
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.2));
        let mut scan = raycast_scan(
            &square_room(5.0),
            |_| pose,
            0.0,
            &ScanPattern::mechanical_default(),
            0.0,
            7,
        )
        .unwrap();
        scan.deskewed = true;
        scan
    }

    #[test]
    fn room_corner_has_max_curvature_in_its_sector() {
        let scan = room_scan();
        let c = curvature(&scan).unwrap();
        // Ring 8, sector containing the +45 degree fold (azimuth 0..60 deg).
        let rings = group_rings(&scan, RingLayout::FromIds).unwrap();
        let ring = &rings[8];
        let sector: Vec<usize> = ring
            .iter()
            .copied()
            .filter(|&i| {
                let az = azimuth(&scan.points[i].position).to_degrees();
                (0.0..60.0).contains(&az) && c[i].is_some()
            })
            .collect();
        let best = sector
            .iter()
            .copied()
            .max_by(|&a, &b| c[a].unwrap().partial_cmp(&c[b].unwrap()).unwrap())
            .unwrap();
        // Distance to the fold line at (5, 5) in xy.
        let p = scan.points[best].position;
        let d = ((p.x - 5.0).powi(2) + (p.y - 5.0).powi(2)).sqrt();
        assert!(d < 0.1, "max-curvature point {d} m from the fold");
    }

    #[test]
    fn flat_wall_yields_planars_but_no_edges() {
        let world = WorldSpec {
            boxes: vec![Aabb::from_corners(4.0, -40.0, -5.0, 5.0, 40.0, 5.0)],
            ground: false,
        };
        let mut scan = raycast_scan(
            &world,
            |_| PoseSE3::identity(),
            0.0,
            &ScanPattern::mechanical_default(),
            0.0,
            8,
        )
        .unwrap();
        scan.deskewed = true;
        let cloud = extract_features(&scan).unwrap();
        assert!(
            cloud.edges.is_empty(),
            "wall produced {} edges",
            cloud.edges.len()
        );
        assert!(!cloud.planars.is_empty());
        // Every sector that has candidate points yields at least one planar.
        let rings = group_rings(&scan, RingLayout::FromIds).unwrap();
        let c = curvature_over_rings(&scan, &rings);
        let sector_of = |i: usize| {
            let az = azimuth(&scan.points[i].position);
            (((az + std::f64::consts::PI) / (std::f64::consts::TAU / 6.0)) as usize).min(5)
        };
        let candidates: std::collections::HashSet<usize> = (0..scan.len())
            .filter(|&i| c[i].is_some())
            .map(sector_of)
            .collect();
        let produced: std::collections::HashSet<usize> =
            cloud.planar_indices.iter().map(|&i| sector_of(i)).collect();
        assert_eq!(candidates, produced);
    }

    #[test]
    fn room_edges_land_on_fold_lines() {
        let scan = room_scan();
        let cloud = extract_features(&scan).unwrap();
        assert!(cloud.edges.len() >= 4, "found {} edges", cloud.edges.len());
        let folds = [(5.0, 5.0), (5.0, -5.0), (-5.0, 5.0), (-5.0, -5.0)];
        for e in &cloud.edges {
            let d = folds
                .iter()
                .map(|(fx, fy)| ((e.x - fx).powi(2) + (e.y - fy).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 0.05, "edge {:?} is {d} m from the nearest fold", e);
        }
    }

    #[test]
    fn sector_quotas_and_suppression_hold() {
        let scan = room_scan();
        let cfg = FeatureConfig::default();
        let cloud = extract_features(&scan).unwrap();
        let rings = group_rings(&scan, RingLayout::FromIds).unwrap();
        let ring_of: std::collections::HashMap<usize, usize> = rings
            .iter()
            .enumerate()
            .flat_map(|(r, v)| v.iter().map(move |&i| (i, r)))
            .collect();
        let sector_of = |i: usize| {
            let az = azimuth(&scan.points[i].position);
            (((az + std::f64::consts::PI) / (std::f64::consts::TAU / 6.0)) as usize).min(5)
        };
        let mut edge_counts = std::collections::HashMap::new();
        let mut planar_counts = std::collections::HashMap::new();
        for &i in &cloud.edge_indices {
            *edge_counts.entry((ring_of[&i], sector_of(i))).or_insert(0usize) += 1;
        }
        for &i in &cloud.planar_indices {
            *planar_counts
                .entry((ring_of[&i], sector_of(i)))
                .or_insert(0usize) += 1;
        }
        assert!(edge_counts.values().all(|&n| n <= cfg.max_edges_per_sector));
        assert!(planar_counts
            .values()
            .all(|&n| n <= cfg.max_planars_per_sector));

        // Suppression: no two edges within 5 ring indices on the same ring.
        for ring in &rings {
            let pos_of: std::collections::HashMap<usize, usize> =
                ring.iter().enumerate().map(|(w, &i)| (i, w)).collect();
            let mut positions: Vec<usize> = cloud
                .edge_indices
                .iter()
                .filter_map(|i| pos_of.get(i).copied())
                .collect();
            positions.sort_unstable();
            for w in positions.windows(2) {
                assert!(w[1] - w[0] > cfg.suppression_window);
            }
        }

        // Edge and planar index sets are disjoint.
        let edge_set: std::collections::HashSet<_> = cloud.edge_indices.iter().collect();
        assert!(cloud.planar_indices.iter().all(|i| !edge_set.contains(i)));
    }

    #[test]
    fn extraction_is_deterministic() {
        let scan = room_scan();
        let a = extract_features(&scan).unwrap();
        let b = extract_features(&scan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn elevation_bins_enable_solid_state_features() {
        let pose = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.2));
        let mut scan = raycast_scan(
            &square_room(5.0),
            |_| pose,
            0.0,
            &ScanPattern::solid_state_default(),
            0.0,
            9,
        )
        .unwrap();
        scan.deskewed = true;
        let cloud = extract_features_with(
            &scan,
            RingLayout::ElevationBins { bin_deg: 1.0 },
            &FeatureConfig::default(),
        )
        .unwrap();
        assert!(!cloud.planars.is_empty());
    }
}
