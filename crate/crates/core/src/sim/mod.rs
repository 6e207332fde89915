//! Synthetic world and LiDAR/IMU generator with ground truth.
//!
//! Worlds are unions of axis-aligned boxes over an optional ground plane.
//! Trajectories are planar waypoint paths compiled into C^2 splines so the
//! IMU model can differentiate them. Every emitted ray is cast from the
//! sensor pose at its own firing time, which is what produces realistic
//! motion skew in the generated sweeps.

mod spline;

pub use spline::CubicSpline;

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::deskew::{ImuSample, GRAVITY};
use crate::geom::{normalize_yaw, Pose2D, PoseSE3};
use crate::scan::{Scan, ScanPoint};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid scan pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sensor pose at t={t} is inside world geometry")]
    SensorInsideGeometry { t: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn from_corners(x0: f64, y0: f64, z0: f64, x1: f64, y1: f64, z1: f64) -> Self {
        Self::new(Vector3::new(x0, y0, z0), Vector3::new(x1, y1, z1))
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Nearest positive ray parameter, slab method.
    fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut tmin = f64::NEG_INFINITY;
        let mut tmax = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut t1, mut t2) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                tmin = tmin.max(t1);
                tmax = tmax.min(t2);
                if tmin > tmax {
                    return None;
                }
            }
        }
        (tmin > 1e-9).then_some(tmin)
    }

    /// Unsigned distance from `p` to the box surface.
    fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        if self.contains(p) {
            (0..3)
                .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
                .fold(f64::INFINITY, f64::min)
        } else {
            let clamped = Vector3::new(
                p.x.clamp(self.min.x, self.max.x),
                p.y.clamp(self.min.y, self.max.y),
                p.z.clamp(self.min.z, self.max.z),
            );
            (p - clamped).norm()
        }
    }
}

/// The synthetic environment: boxes plus an optional ground plane at z = 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorldSpec {
    pub boxes: Vec<Aabb>,
    pub ground: bool,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !(0..3).all(|a| b.max[a] > b.min[a]) {
                return Err(SimError::InvalidWorld(format!(
                    "box {i} has non-positive extent"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    /// Range to the nearest surface along `dir`, if any.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        for b in &self.boxes {
            if let Some(t) = b.ray_hit(origin, dir) {
                if best.map_or(true, |cur| t < cur) {
                    best = Some(t);
                }
            }
        }
        if self.ground && dir.z.abs() > 1e-15 {
            let t = -origin.z / dir.z;
            if t > 1e-9 && best.map_or(true, |cur| t < cur) {
                best = Some(t);
            }
        }
        best
    }

    /// Unsigned distance from `p` to the nearest world surface.
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        let mut d = if self.ground { p.z.abs() } else { f64::INFINITY };
        for b in &self.boxes {
            d = d.min(b.surface_distance(p));
        }
        d
    }
}

/// One emitted ray of a sweep, in the sensor frame.
#[derive(Debug, Clone, Copy)]
pub struct RaySpec {
    pub dir: Vector3<f64>,
    pub time_offset: f64,
    pub ring: u16,
    /// Pattern angles (azimuth-like, elevation-like), radians.
    pub angles: (f64, f64),
}

/// Sensor scanning pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum ScanPattern {
    /// Spinning multi-ring sensor; ring elevations span the vertical FOV.
    Mechanical {
        rings: usize,
        /// Full vertical span, degrees (e.g. 30 for +/-15).
        vertical_fov_deg: f64,
        horizontal_step_deg: f64,
        period: f64,
    },
    /// Non-repetitive rosette: angles (A cos 2 pi f1 t, A sin 2 pi f2 t)
    /// scaled to the FOV cone, driven by absolute time.
    SolidState {
        f1: f64,
        f2: f64,
        /// Full cone angle, degrees.
        fov_deg: f64,
        points_per_sweep: usize,
        period: f64,
    },
}

impl ScanPattern {
    /// VLP-16-like default: 16 rings, +/-15 deg, 0.4 deg steps, 0.1 s sweeps.
    pub fn mechanical_default() -> Self {
        Self::Mechanical {
            rings: 16,
            vertical_fov_deg: 30.0,
            horizontal_step_deg: 0.4,
            period: 0.1,
        }
    }

    /// Rosette default: 97/101 Hz pair over a 70 deg cone.
    pub fn solid_state_default() -> Self {
        Self::SolidState {
            f1: 97.0,
            f2: 101.0,
            fov_deg: 70.0,
            points_per_sweep: 20_000,
            period: 0.1,
        }
    }

    pub fn period(&self) -> f64 {
        match self {
            Self::Mechanical { period, .. } | Self::SolidState { period, .. } => *period,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            Self::Mechanical {
                rings,
                vertical_fov_deg,
                horizontal_step_deg,
                period,
            } => {
                if *rings == 0 {
                    return Err(SimError::InvalidPattern("ring count must be >= 1".into()));
                }
                if *vertical_fov_deg < 0.0 || *period <= 0.0 {
                    return Err(SimError::InvalidPattern("fov and period must be positive".into()));
                }
                let steps = 360.0 / horizontal_step_deg;
                if (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
                    return Err(SimError::InvalidPattern(format!(
                        "horizontal step {horizontal_step_deg} deg does not divide 360"
                    )));
                }
                Ok(())
            }
            Self::SolidState {
                f1,
                f2,
                fov_deg,
                points_per_sweep,
                period,
            } => {
                if *f1 <= 0.0 || *f2 <= 0.0 || *fov_deg <= 0.0 || *period <= 0.0 {
                    return Err(SimError::InvalidPattern(
                        "frequencies, fov and period must be positive".into(),
                    ));
                }
                if *points_per_sweep == 0 {
                    return Err(SimError::InvalidPattern("points_per_sweep must be > 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Ray table for the sweep starting at absolute time `t0`.
    pub fn rays(&self, t0: f64) -> Vec<RaySpec> {
        match self {
            Self::Mechanical {
                rings,
                vertical_fov_deg,
                horizontal_step_deg,
                period,
            } => {
                let steps = (360.0 / horizontal_step_deg).round() as usize;
                let half_fov = vertical_fov_deg.to_radians() / 2.0;
                let elevations: Vec<f64> = (0..*rings)
                    .map(|r| {
                        if *rings == 1 {
                            0.0
                        } else {
                            -half_fov + 2.0 * half_fov * r as f64 / (*rings as f64 - 1.0)
                        }
                    })
                    .collect();
                let mut out = Vec::with_capacity(steps * rings);
                for ia in 0..steps {
                    let az = -std::f64::consts::PI
                        + std::f64::consts::TAU * ia as f64 / steps as f64;
                    let t_off = period * ia as f64 / steps as f64;
                    for (r, &el) in elevations.iter().enumerate() {
                        out.push(RaySpec {
                            dir: dir_from_angles(az, el),
                            time_offset: t_off,
                            ring: r as u16,
                            angles: (az, el),
                        });
                    }
                }
                out
            }
            Self::SolidState {
                f1,
                f2,
                fov_deg,
                points_per_sweep,
                period,
            } => {
                let amp = fov_deg.to_radians() / 2.0;
                (0..*points_per_sweep)
                    .map(|i| {
                        let t_off = period * i as f64 / *points_per_sweep as f64;
                        let t = t0 + t_off;
                        let ax = amp * (std::f64::consts::TAU * f1 * t).cos();
                        let ay = amp * (std::f64::consts::TAU * f2 * t).sin();
                        RaySpec {
                            dir: dir_from_angles(ax, ay),
                            time_offset: t_off,
                            ring: 0,
                            angles: (ax, ay),
                        }
                    })
                    .collect()
            }
        }
    }
}

fn dir_from_angles(az: f64, el: f64) -> Vector3<f64> {
    Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Planar waypoint path with an optional derived-speed parameterization.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub waypoints: Vec<(f64, Pose2D)>,
    pub closed_loop: bool,
    /// Sensor mounting height above z = 0, meters.
    pub sensor_height: f64,
}

impl TrajectorySpec {
    pub fn new(waypoints: Vec<(f64, Pose2D)>, closed_loop: bool, sensor_height: f64) -> Self {
        Self {
            waypoints,
            closed_loop,
            sensor_height,
        }
    }

    /// Derive waypoint stamps from a piecewise-constant speed profile
    /// (`speeds[i]` applies to the segment from waypoint `i` to `i + 1`;
    /// a single entry applies everywhere).
    pub fn with_speed(
        points: &[Pose2D],
        speeds: &[f64],
        start_time: f64,
        closed_loop: bool,
        sensor_height: f64,
    ) -> Result<Self, SimError> {
        if points.len() < 2 {
            return Err(SimError::InvalidTrajectory("need at least two waypoints".into()));
        }
        if speeds.is_empty() || speeds.iter().any(|s| *s <= 0.0) {
            return Err(SimError::InvalidTrajectory("speeds must be positive".into()));
        }
        let mut t = start_time;
        let mut waypoints = vec![(t, points[0])];
        for i in 1..points.len() {
            let speed = speeds[(i - 1).min(speeds.len() - 1)];
            let d = ((points[i].x - points[i - 1].x).powi(2)
                + (points[i].y - points[i - 1].y).powi(2))
            .sqrt();
            t += (d / speed).max(1e-3);
            waypoints.push((t, points[i]));
        }
        Ok(Self::new(waypoints, closed_loop, sensor_height))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::InvalidTrajectory("need at least two waypoints".into()));
        }
        if !self.waypoints.windows(2).all(|w| w[1].0 > w[0].0) {
            return Err(SimError::InvalidTrajectory(
                "waypoint stamps must be strictly increasing".into(),
            ));
        }
        if self.closed_loop {
            let first = self.waypoints.first().unwrap().1;
            let last = self.waypoints.last().unwrap().1;
            let gap = ((first.x - last.x).powi(2) + (first.y - last.y).powi(2)).sqrt();
            if gap > 1e-6 {
                return Err(SimError::InvalidTrajectory(format!(
                    "closed-loop trajectory ends {gap} m from its start"
                )));
            }
        }
        Ok(())
    }

    /// Fit the C^2 spline representation.
    pub fn compile(&self) -> Result<Trajectory, SimError> {
        self.validate()?;
        let ts: Vec<f64> = self.waypoints.iter().map(|(t, _)| *t).collect();
        let xs: Vec<f64> = self.waypoints.iter().map(|(_, p)| p.x).collect();
        let ys: Vec<f64> = self.waypoints.iter().map(|(_, p)| p.y).collect();
        // Unwrap yaw so the spline never interpolates across the +/-pi seam.
        let mut yaws = Vec::with_capacity(ts.len());
        let mut prev = self.waypoints[0].1.yaw();
        let mut acc = prev;
        yaws.push(acc);
        for (_, p) in self.waypoints.iter().skip(1) {
            acc += normalize_yaw(p.yaw() - prev);
            prev = p.yaw();
            yaws.push(acc);
        }
        Ok(Trajectory {
            x: CubicSpline::natural(&ts, &xs),
            y: CubicSpline::natural(&ts, &ys),
            yaw: CubicSpline::natural(&ts, &yaws),
            sensor_height: self.sensor_height,
            t_start: ts[0],
            t_end: *ts.last().unwrap(),
        })
    }
}

/// Compiled continuous trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    x: CubicSpline,
    y: CubicSpline,
    yaw: CubicSpline,
    sensor_height: f64,
    t_start: f64,
    t_end: f64,
}

impl Trajectory {
    pub fn domain(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn pose2d_at(&self, t: f64) -> Pose2D {
        Pose2D::new(self.x.eval(t), self.y.eval(t), self.yaw.eval(t))
    }

    pub fn pose_at(&self, t: f64) -> PoseSE3<f64> {
        self.pose2d_at(t).to_se3_with(self.sensor_height, 0.0, 0.0)
    }
}

/// Cast one sweep from a moving sensor.
///
/// Each ray fires from `pose_at(t0 + offset)`; the return is the nearest
/// box/ground intersection plus Gaussian range noise, stored in the sensor
/// frame at the firing time. Misses are dropped.
pub fn raycast_scan(
    world: &WorldSpec,
    pose_at: impl Fn(f64) -> PoseSE3<f64> + Sync,
    t0: f64,
    pattern: &ScanPattern,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scan, SimError> {
    world.validate()?;
    pattern.validate()?;
    let rays = pattern.rays(t0);
    let noise: Vec<f64> = if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| SimError::InvalidConfig(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rays.len()).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; rays.len()]
    };

    let hits: Result<Vec<Option<ScanPoint>>, SimError> = rays
        .par_iter()
        .zip(noise.par_iter())
        .map(|(ray, eps)| {
            let t = t0 + ray.time_offset;
            let pose = pose_at(t);
            if world.contains(&pose.translation) {
                return Err(SimError::SensorInsideGeometry { t });
            }
            let dir_world = pose.rotation * ray.dir;
            Ok(world.cast_ray(&pose.translation, &dir_world).map(|range| {
                ScanPoint {
                    position: ray.dir * (range + eps).max(1e-6),
                    intensity: 1.0,
                    ring: ray.ring,
                    time_offset: ray.time_offset,
                }
            }))
        })
        .collect();

    let mut scan = Scan::new(t0);
    scan.points = hits?.into_iter().flatten().collect();
    Ok(scan)
}

/// Sample ideal IMU measurements along the trajectory.
///
/// The trajectory is differentiated by central finite differences with
/// dt = 1e-4 s; noise densities are per sqrt(Hz) and scaled by sqrt(rate).
pub fn simulate_imu(
    traj: &Trajectory,
    rate: f64,
    gyro_noise_density: f64,
    accel_noise_density: f64,
    seed: u64,
) -> Result<Vec<ImuSample>, SimError> {
    if rate <= 0.0 {
        return Err(SimError::InvalidConfig(format!("imu rate {rate} must be > 0")));
    }
    let (t_start, t_end) = traj.domain();
    let h = 1e-4;
    let n = ((t_end - t_start) * rate).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_g = gyro_noise_density * rate.sqrt();
    let sigma_a = accel_noise_density * rate.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw3 = |sigma: f64| {
        if sigma > 0.0 {
            Vector3::new(
                normal.sample(&mut rng) * sigma,
                normal.sample(&mut rng) * sigma,
                normal.sample(&mut rng) * sigma,
            )
        } else {
            Vector3::zeros()
        }
    };

    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = t_start + i as f64 / rate;
        let (pm, p0, pp) = (traj.pose_at(t - h), traj.pose_at(t), traj.pose_at(t + h));
        let omega_body = (pm.rotation.inverse() * pp.rotation).scaled_axis() / (2.0 * h);
        let a_world = (pp.translation - p0.translation * 2.0 + pm.translation) / (h * h);
        let accel_body = p0.rotation.inverse() * (a_world - GRAVITY);
        out.push(ImuSample {
            stamp: t,
            gyro: omega_body + draw3(sigma_g),
            accel: accel_body + draw3(sigma_a),
        });
    }
    Ok(out)
}

/// Noise configuration for dataset generation.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub range_sigma: f64,
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            range_sigma: 0.0,
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
        }
    }
}

/// Summary of a written dataset.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub scan_stamps: Vec<f64>,
    pub imu_count: usize,
    pub has_ground_truth: bool,
}

impl DatasetManifest {
    pub fn scan_count(&self) -> usize {
        self.scan_stamps.len()
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate and write a complete dataset: scans, IMU stream, ground truth.
///
/// Layout: `scans.csv` manifest (`stamp,filename`), one
/// `scans/scan_NNNNNN.csv` per sweep (`t_offset,x,y,z,intensity,ring`),
/// `imu.csv` (`t,gx,gy,gz,ax,ay,az`), and `ground_truth.txt` in trajectory
/// format. Byte-identical for identical seeds.
pub fn generate_dataset(
    world: &WorldSpec,
    traj_spec: &TrajectorySpec,
    pattern: &ScanPattern,
    imu_rate: f64,
    noise: &NoiseSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, SimError> {
    world.validate()?;
    pattern.validate()?;
    let traj = traj_spec.compile()?;
    let (t_start, t_end) = traj.domain();
    let period = pattern.period();

    std::fs::create_dir_all(out_dir.join("scans"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(out_dir.join("scans.csv"))?);
    writeln!(manifest, "stamp,filename")?;
    let mut gt = std::io::BufWriter::new(std::fs::File::create(out_dir.join("ground_truth.txt"))?);
    writeln!(gt, "# t tx ty tz qx qy qz qw")?;

    let mut scan_stamps = Vec::new();
    let mut i = 0usize;
    loop {
        let t0 = t_start + i as f64 * period;
        if t0 + period > t_end + 1e-9 {
            break;
        }
        let scan = raycast_scan(
            world,
            |t| traj.pose_at(t),
            t0,
            pattern,
            noise.range_sigma,
            derive_seed(seed, i as u64 + 1),
        )?;
        let name = format!("scan_{i:06}.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            out_dir.join("scans").join(&name),
        )?);
        writeln!(f, "t_offset,x,y,z,intensity,ring")?;
        for p in &scan.points {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                p.time_offset, p.position.x, p.position.y, p.position.z, p.intensity, p.ring
            )?;
        }
        writeln!(manifest, "{},{}", t0, name)?;

        let pose = traj.pose_at(t0);
        let q = pose.rotation.as_ref();
        writeln!(
            gt,
            "{} {} {} {} {} {} {} {}",
            t0, pose.translation.x, pose.translation.y, pose.translation.z, q.i, q.j, q.k, q.w
        )?;
        scan_stamps.push(t0);
        i += 1;
    }

    let imu = simulate_imu(
        &traj,
        imu_rate,
        noise.gyro_noise_density,
        noise.accel_noise_density,
        derive_seed(seed, 0),
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("imu.csv"))?);
    writeln!(f, "t,gx,gy,gz,ax,ay,az")?;
    for s in &imu {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            s.stamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }

    Ok(DatasetManifest {
        dir: out_dir.to_path_buf(),
        scan_stamps,
        imu_count: imu.len(),
        has_ground_truth: true,
    })
}
