//! Shared scenario builders and independent oracles for the acceptance
//! suite. Everything here stays implementation-independent: the grid filter
//! integrates the Bayes recursion exhaustively, and the plane fit is a plain
//! least-squares eigendecomposition.

use nalgebra::{Matrix3, Vector3};
use slam_core::geom::{normalize_yaw, Pose2D};
use slam_core::psf::{mean_squared_map_residual, LikelihoodModel};
use slam_core::scan::Scan;
use slam_core::scan_match::LocalMap;
use slam_core::sim::{Aabb, WorldSpec};

/// RMS distance of points to their least-squares plane.
pub fn plane_fit_rms(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    (min / n).sqrt()
}

/// A structured room with an off-center block, used by the filter tests.
pub fn toy_room() -> WorldSpec {
    WorldSpec {
        boxes: vec![
            Aabb::from_corners(-5.5, -5.5, -2.0, 5.5, -5.0, 4.0),
            Aabb::from_corners(-5.5, 5.0, -2.0, 5.5, 5.5, 4.0),
            Aabb::from_corners(-5.5, -5.5, -2.0, -5.0, 5.5, 4.0),
            Aabb::from_corners(5.0, -5.5, -2.0, 5.5, 5.5, 4.0),
            Aabb::from_corners(1.5, 1.0, -2.0, 3.0, 2.5, 4.0),
        ],
        ground: true,
    }
}

/// Exhaustive grid realization of the planar Bayes filter: uniform prior on
/// the initialization square, Gaussian motion kernel, and the same scan
/// likelihood the particle filter uses.
pub struct GridFilter {
    xs: Vec<f64>,
    ys: Vec<f64>,
    yaws: Vec<f64>,
    p: Vec<f64>,
}

impl GridFilter {
    /// Cell centers tile the square exactly: the square side and the yaw
    /// half-range must be integer multiples of the cell sizes.
    pub fn uniform_square(
        center: &Pose2D,
        side: f64,
        yaw_half: f64,
        h_xy: f64,
        h_yaw: f64,
        margin_xy: usize,
        margin_yaw: usize,
    ) -> Self {
        let half_cells = (side / h_xy / 2.0).round() as i64;
        let half_yaw_cells = (yaw_half / h_yaw).round() as i64;
        let axis = |c0: f64, h: f64, inner: i64, margin: i64| -> (Vec<f64>, Vec<bool>) {
            let mut centers = Vec::new();
            let mut inside = Vec::new();
            for k in -(inner + margin)..(inner + margin) {
                centers.push(c0 + (k as f64 + 0.5) * h);
                inside.push(k >= -inner && k < inner);
            }
            (centers, inside)
        };
        let (xs, x_in) = axis(center.x, h_xy, half_cells, margin_xy as i64);
        let (ys, y_in) = axis(center.y, h_xy, half_cells, margin_xy as i64);
        let (yaws, yaw_in) = axis(center.yaw(), h_yaw, half_yaw_cells, margin_yaw as i64);
        let mut p = vec![0.0; xs.len() * ys.len() * yaws.len()];
        let mut idx = 0;
        for xi in 0..xs.len() {
            for yi in 0..ys.len() {
                for wi in 0..yaws.len() {
                    if x_in[xi] && y_in[yi] && yaw_in[wi] {
                        p[idx] = 1.0;
                    }
                    idx += 1;
                }
            }
        }
        let sum: f64 = p.iter().sum();
        for v in &mut p {
            *v /= sum;
        }
        Self { xs, ys, yaws, p }
    }

    fn index(&self, xi: usize, yi: usize, wi: usize) -> usize {
        (xi * self.ys.len() + yi) * self.yaws.len() + wi
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (nx, ny, nw) = (self.xs.len(), self.ys.len(), self.yaws.len());
        (0..nx).flat_map(move |xi| (0..ny).flat_map(move |yi| (0..nw).map(move |wi| (xi, yi, wi))))
    }

    /// Bayes prediction: body-frame motion `delta` with Gaussian noise.
    pub fn predict(&mut self, delta: &Pose2D, sx: f64, sy: f64, syaw: f64) {
        let gauss = |e: f64, s: f64| {
            if s > 0.0 {
                (-0.5 * (e / s) * (e / s)).exp() / s
            } else if e.abs() < 1e-12 {
                1.0
            } else {
                0.0
            }
        };
        let mut next = vec![0.0; self.p.len()];
        for (sxi, syi, swi) in self.cells() {
            let ps = self.p[self.index(sxi, syi, swi)];
            if ps <= 0.0 {
                continue;
            }
            let src = Pose2D::new(self.xs[sxi], self.ys[syi], self.yaws[swi]);
            for (dxi, dyi, dwi) in self.cells() {
                let dst = Pose2D::new(self.xs[dxi], self.ys[dyi], self.yaws[dwi]);
                let rel = src.between(&dst);
                let k = gauss(rel.x - delta.x, sx)
                    * gauss(rel.y - delta.y, sy)
                    * gauss(normalize_yaw(rel.yaw() - delta.yaw()), syaw);
                if k > 0.0 {
                    next[self.index(dxi, dyi, dwi)] += ps * k;
                }
            }
        }
        let sum: f64 = next.iter().sum();
        for v in &mut next {
            *v /= sum;
        }
        self.p = next;
    }

    /// Bayes correction with the particle filter's scan likelihood.
    pub fn weight(&mut self, scan: &Scan<f64>, map: &LocalMap<f64>, model: &LikelihoodModel) {
        let two_sigma2 = 2.0 * model.sigma * model.sigma;
        for (xi, yi, wi) in self.cells().collect::<Vec<_>>() {
            let idx = self.index(xi, yi, wi);
            if self.p[idx] <= 0.0 {
                continue;
            }
            let pose = Pose2D::new(self.xs[xi], self.ys[yi], self.yaws[wi]);
            let (e, _) = mean_squared_map_residual(scan, map, model, &pose);
            self.p[idx] *= (-e / two_sigma2).exp();
        }
        let sum: f64 = self.p.iter().sum();
        for v in &mut self.p {
            *v /= sum;
        }
    }

    /// Posterior mean (circular in yaw) and per-axis standard deviations.
    pub fn mean_and_std(&self) -> (Pose2D, [f64; 3]) {
        let (mut mx, mut my, mut sin, mut cos) = (0.0, 0.0, 0.0, 0.0);
        for (xi, yi, wi) in self.cells() {
            let w = self.p[self.index(xi, yi, wi)];
            mx += w * self.xs[xi];
            my += w * self.ys[yi];
            sin += w * self.yaws[wi].sin();
            cos += w * self.yaws[wi].cos();
        }
        let myaw = sin.atan2(cos);
        let (mut vx, mut vy, mut vyaw) = (0.0, 0.0, 0.0);
        for (xi, yi, wi) in self.cells() {
            let w = self.p[self.index(xi, yi, wi)];
            vx += w * (self.xs[xi] - mx).powi(2);
            vy += w * (self.ys[yi] - my).powi(2);
            vyaw += w * normalize_yaw(self.yaws[wi] - myaw).powi(2);
        }
        (
            Pose2D::new(mx, my, myaw),
            [vx.sqrt(), vy.sqrt(), vyaw.sqrt()],
        )
    }
}

/// Analytic feature map of [`toy_room`]: planar samples exactly on the
/// walls, floor, and block faces; edge samples exactly on the vertical fold
/// lines. Matching against it isolates the optimizer from feature-extraction
/// sampling effects.
pub fn analytic_room_map() -> LocalMap<f64> {
    let mut planars = Vec::new();
    let step = 0.25;
    let (lo, hi, top) = (-5.0, 5.0, 3.0);
    let mut grid = |from: f64, to: f64| -> Vec<f64> {
        let n = ((to - from) / step).round() as usize;
        (0..=n).map(|i| from + i as f64 * step).collect()
    };
    // Floor.
    for x in grid(lo, hi) {
        for y in grid(lo, hi) {
            planars.push(Vector3::new(x, y, 0.0));
        }
    }
    // Inner wall faces.
    for a in grid(lo, hi) {
        for z in grid(0.0, top) {
            planars.push(Vector3::new(a, lo, z));
            planars.push(Vector3::new(a, hi, z));
            planars.push(Vector3::new(lo, a, z));
            planars.push(Vector3::new(hi, a, z));
        }
    }
    // Block faces (x 1.5..3.0, y 1.0..2.5).
    for a in grid(1.5, 3.0) {
        for z in grid(0.0, top) {
            planars.push(Vector3::new(a, 1.0, z));
            planars.push(Vector3::new(a, 2.5, z));
        }
    }
    for a in grid(1.0, 2.5) {
        for z in grid(0.0, top) {
            planars.push(Vector3::new(1.5, a, z));
            planars.push(Vector3::new(3.0, a, z));
        }
    }
    // Vertical fold lines: room corners and block corners.
    let mut edges = Vec::new();
    let corners = [
        (lo, lo),
        (lo, hi),
        (hi, lo),
        (hi, hi),
        (1.5, 1.0),
        (1.5, 2.5),
        (3.0, 1.0),
        (3.0, 2.5),
    ];
    for (x, y) in corners {
        for z in grid(0.0, top) {
            edges.push(Vector3::new(x, y, z));
        }
    }
    LocalMap::new(edges, planars, 0.0).unwrap()
}
