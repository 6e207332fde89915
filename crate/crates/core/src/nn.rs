//! Exact k-nearest-neighbor and radius search over 3D points.
//!
//! The index is a balanced k-d tree: the split axis is the widest-spread
//! dimension of the subrange and the split point is the median. Queries are
//! exact; results are ordered by squared distance with ties broken by the
//! lower original index, so they can be compared verbatim against an
//! exhaustive scan.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{real, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Immutable k-d tree over 3-vectors; original indices are preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct KdIndex<T: Real = f64> {
    points: Vec<Vector3<T>>,
    nodes: Vec<Node>,
    root: i32,
}

impl<T: Real> KdIndex<T> {
    /// Build an index over `points`. Duplicates are allowed.
    pub fn build(points: Vec<Vector3<T>>) -> Result<Self, NnError> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(NnError::NonFinitePoint { index: i });
            }
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut idx = Self {
            points,
            nodes: Vec::with_capacity(order.len()),
            root: -1,
        };
        idx.root = idx.build_range(&mut order);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<T> {
        &self.points[index]
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    fn build_range(&mut self, order: &mut [u32]) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = self.widest_axis(order);
        let mid = order.len() / 2;
        let points = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis as usize]
                .partial_cmp(&points[b as usize][axis as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = order[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis,
            left: -1,
            right: -1,
        });
        // Split the borrow: recurse on the two halves around the median.
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo);
        let right = self.build_range(hi);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    fn widest_axis(&self, order: &[u32]) -> u8 {
        let mut min = [T::max_value().unwrap(); 3];
        let mut max = [T::min_value().unwrap(); 3];
        for &i in order {
            let p = &self.points[i as usize];
            for a in 0..3 {
                if p[a] < min[a] {
                    min[a] = p[a];
                }
                if p[a] > max[a] {
                    max[a] = p[a];
                }
            }
        }
        let mut best = 0u8;
        let mut spread = max[0] - min[0];
        for a in 1..3 {
            let s = max[a] - min[a];
            if s > spread {
                spread = s;
                best = a as u8;
            }
        }
        best
    }

    /// Maximum node depth; 0 for an empty tree.
    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], id: i32) -> usize {
            if id < 0 {
                return 0;
            }
            let n = &nodes[id as usize];
            1 + rec(nodes, n.left).max(rec(nodes, n.right))
        }
        rec(&self.nodes, self.root)
    }

    /// The `min(k, n)` nearest points as `(original index, squared distance)`,
    /// ascending by distance with ties broken by lower index.
    pub fn nearest_k(&self, query: &Vector3<T>, k: usize) -> Vec<(usize, T)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut best: Vec<(T, u32)> = Vec::with_capacity(k);
        self.knn_rec(self.root, query, k, &mut best);
        best.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    fn knn_rec(&self, id: i32, query: &Vector3<T>, k: usize, best: &mut Vec<(T, u32)>) {
        if id < 0 {
            return;
        }
        let node = self.nodes[id as usize];
        let p = &self.points[node.point as usize];
        let d2 = (p - query).norm_squared();
        Self::offer(best, k, (d2, node.point));

        let axis = node.axis as usize;
        let diff = query[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.knn_rec(near, query, k, best);
        // The far side may still hold an equal-distance, lower-index point,
        // so prune only on a strict bound violation.
        if best.len() < k || diff * diff <= best[best.len() - 1].0 {
            self.knn_rec(far, query, k, best);
        }
    }

    pub(crate) fn offer(best: &mut Vec<(T, u32)>, k: usize, cand: (T, u32)) {
        if k == 0 {
            return;
        }
        let worse = |a: &(T, u32), b: &(T, u32)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);
        if best.len() == k {
            if worse(&cand, &best[k - 1]) {
                return;
            }
            best.pop();
        }
        let pos = best.partition_point(|e| !worse(e, &cand));
        best.insert(pos, cand);
    }

    /// All points with squared distance `<= r^2`, ascending by distance with
    /// ties broken by lower index.
    pub fn radius(&self, query: &Vector3<T>, r: T) -> Vec<(usize, T)> {
        let mut out: Vec<(T, u32)> = Vec::new();
        if r > T::zero() {
            self.radius_rec(self.root, query, r * r, &mut out);
        }
        out.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    fn radius_rec(&self, id: i32, query: &Vector3<T>, r2: T, out: &mut Vec<(T, u32)>) {
        if id < 0 {
            return;
        }
        let node = self.nodes[id as usize];
        let p = &self.points[node.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 <= r2 {
            out.push((d2, node.point));
        }
        let axis = node.axis as usize;
        let diff = query[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.radius_rec(near, query, r2, out);
        if diff * diff <= r2 {
            self.radius_rec(far, query, r2, out);
        }
    }
}

/// Reference answer: full sort of all distances with the same ordering
/// contract. Deliberately written without any of the index's machinery so it
/// stays an independent oracle.
pub fn brute_force_k<T: Real>(
    points: &[Vector3<T>],
    query: &Vector3<T>,
    k: usize,
) -> Vec<(usize, T)> {
    let mut all: Vec<(T, u32)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i as u32))
        .collect();
    all.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d, i)| (i as usize, d)).collect()
}

/// Exhaustive-scan baseline for the benchmark: selection into a fixed-size
/// candidate list, O(n k) per query.
pub fn linear_scan_k<T: Real>(
    points: &[Vector3<T>],
    query: &Vector3<T>,
    k: usize,
) -> Vec<(usize, T)> {
    let mut best: Vec<(T, u32)> = Vec::with_capacity(k);
    for (i, p) in points.iter().enumerate() {
        KdIndex::offer(&mut best, k, ((p - query).norm_squared(), i as u32));
    }
    best.into_iter().map(|(d, i)| (i as usize, d)).collect()
}

/// Benchmark result; `Display` renders the machine-readable report line.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub n: usize,
    pub q: usize,
    pub k: usize,
    pub build_ms: f64,
    pub kd_qps: f64,
    pub brute_qps: f64,
    pub speedup: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "n={} q={} k={} build_ms={} kd_qps={} brute_qps={} speedup={}",
            self.n, self.q, self.k, self.build_ms, self.kd_qps, self.brute_qps, self.speedup
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Time k-d tree queries against the in-repo exhaustive scan.
///
/// Points and queries are generated deterministically from `seed`; timings are
/// wall-clock medians over `reps >= 5` repetitions. The brute-force arm runs
/// on a deterministic prefix of at most 2000 queries (its throughput is
/// per-query, so the prefix does not change the reported rate).
pub fn bench(n: usize, q: usize, k: usize, seed: u64) -> BenchReport {
    assert!(n >= 1000, "bench requires n >= 1000");
    let reps = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_points = |count: usize| -> Vec<Vector3<f64>> {
        (0..count)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                )
            })
            .collect()
    };
    let points = random_points(n);
    let queries = random_points(q);

    let mut build_times = Vec::with_capacity(reps);
    let mut index = KdIndex::build(points.clone()).expect("finite points");
    for _ in 0..reps {
        let start = Instant::now();
        index = KdIndex::build(points.clone()).expect("finite points");
        build_times.push(start.elapsed().as_secs_f64() * 1e3);
    }

    let mut kd_times = Vec::with_capacity(reps);
    let mut checksum = 0usize;
    for _ in 0..reps {
        let start = Instant::now();
        for query in &queries {
            let res = index.nearest_k(query, k);
            checksum = checksum.wrapping_add(res[0].0);
        }
        kd_times.push(start.elapsed().as_secs_f64());
    }

    let brute_q = q.min(2000);
    let mut brute_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for query in &queries[..brute_q] {
            let res = brute_force_k(&points, query, k);
            checksum = checksum.wrapping_add(res[0].0);
        }
        brute_times.push(start.elapsed().as_secs_f64());
    }
    std::hint::black_box(checksum);

    let kd_qps = q as f64 / median(kd_times);
    let brute_qps = brute_q as f64 / median(brute_times);
    BenchReport {
        n,
        q,
        k,
        build_ms: median(build_times),
        kd_qps,
        brute_qps,
        speedup: kd_qps / brute_qps,
    }
}

/// Deterministic point cloud used by the benchmark and its tests.
pub fn random_cloud<T: Real>(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vector3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vector3::new(
                real(rng.gen_range(lo..hi)),
                real(rng.gen_range(lo..hi)),
                real(rng.gen_range(lo..hi)),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_index_is_valid() {
        let idx = KdIndex::<f64>::build(Vec::new()).unwrap();
        assert!(idx.is_empty());
        assert!(idx.nearest_k(&Vector3::zeros(), 3).is_empty());
        assert!(idx.radius(&Vector3::zeros(), 1.0).is_empty());
    }

    #[test]
    fn single_point_index() {
        let idx = KdIndex::build(vec![Vector3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(idx.len(), 1);
        let res = idx.nearest_k(&Vector3::new(1.0, 2.0, 3.0), 5);
        assert_eq!(res, vec![(0, 0.0)]);
    }

    #[test]
    fn non_finite_point_rejected() {
        let err = KdIndex::build(vec![Vector3::new(f64::NAN, 0.0, 0.0)]).unwrap_err();
        assert_eq!(err, NnError::NonFinitePoint { index: 0 });
    }

    #[test]
    fn stored_point_found_at_distance_zero() {
        let pts = random_cloud::<f64>(500, 0.0, 10.0, 3);
        let idx = KdIndex::build(pts.clone()).unwrap();
        for (i, p) in pts.iter().enumerate().step_by(17) {
            let res = idx.nearest_k(p, 1);
            assert_eq!(res[0].1, 0.0);
            assert_eq!(pts[res[0].0], *p);
            let _ = i;
        }
    }

    #[test]
    fn k_larger_than_n_returns_all() {
        let pts = random_cloud::<f64>(7, 0.0, 1.0, 4);
        let idx = KdIndex::build(pts).unwrap();
        assert_eq!(idx.nearest_k(&Vector3::zeros(), 20).len(), 7);
    }

    #[test]
    fn balanced_depth_bound() {
        let n = 10_000;
        let pts = random_cloud::<f64>(n, 0.0, 100.0, 5);
        let idx = KdIndex::build(pts).unwrap();
        let bound = 2 * (n as f64).log2().ceil() as usize;
        assert!(idx.depth() <= bound, "depth {} > {}", idx.depth(), bound);
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_cloud::<f64>(2000, 0.0, 50.0, 6);
        let queries = random_cloud::<f64>(200, -5.0, 55.0, 7);
        let idx = KdIndex::build(pts.clone()).unwrap();
        for k in [1, 5, 20] {
            for q in &queries {
                assert_eq!(idx.nearest_k(q, k), brute_force_k(&pts, q, k));
            }
        }
    }

    #[test]
    fn knn_tie_breaking_on_duplicates() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        let pts = vec![p, Vector3::new(5.0, 0.0, 0.0), p, p];
        let idx = KdIndex::build(pts).unwrap();
        let res = idx.nearest_k(&p, 3);
        assert_eq!(res, vec![(0, 0.0), (2, 0.0), (3, 0.0)]);
    }

    #[test]
    fn radius_trivial_cases() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)];
        let idx = KdIndex::build(pts).unwrap();
        assert!(idx
            .radius(&Vector3::new(0.9, 0.9, 0.0), 0.5)
            .is_empty());
        assert_eq!(idx.radius(&Vector3::zeros(), 1e9).len(), 2);
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = random_cloud::<f64>(1000, 0.0, 20.0, 8);
        let queries = random_cloud::<f64>(50, 0.0, 20.0, 9);
        let idx = KdIndex::build(pts.clone()).unwrap();
        for q in &queries {
            for r in [0.5, 2.0, 8.0] {
                let got = idx.radius(q, r);
                let want: Vec<(usize, f64)> = {
                    let mut all: Vec<(usize, f64)> = pts
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (i, (p - q).norm_squared()))
                        .filter(|(_, d2)| *d2 <= r * r)
                        .collect();
                    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                    all
                };
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn distances_non_decreasing() {
        let pts = random_cloud::<f64>(512, 0.0, 10.0, 10);
        let idx = KdIndex::build(pts).unwrap();
        let res = idx.nearest_k(&Vector3::new(5.0, 5.0, 5.0), 32);
        for w in res.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let pts = random_cloud::<f64>(3000, 0.0, 10.0, 11);
        let a = KdIndex::build(pts.clone()).unwrap();
        let b = KdIndex::build(pts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bench_smoke_small() {
        let report = bench(1000, 100, 5, 42);
        assert!(report.speedup > 0.0);
        assert!(report.kd_qps > 0.0 && report.brute_qps > 0.0);
        let line = report.to_string();
        assert!(line.starts_with("n=1000 q=100 k=5 build_ms="));
    }

    #[test]
    fn generic_f32_queries_match_brute() {
        let pts = random_cloud::<f32>(300, 0.0, 5.0, 12);
        let idx = KdIndex::build(pts.clone()).unwrap();
        let q = Vector3::new(2.5f32, 2.5, 2.5);
        assert_eq!(idx.nearest_k(&q, 4), brute_force_k(&pts, &q, 4));
    }
}
