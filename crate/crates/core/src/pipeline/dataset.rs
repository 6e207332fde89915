//! On-disk dataset and trajectory formats.
//!
//! Layout: `scans.csv` manifest (`stamp,filename`), per-scan CSVs under
//! `scans/` with header `t_offset,x,y,z,intensity,ring`, an optional
//! `imu.csv` (`t,gx,gy,gz,ax,ay,az`), and an optional `ground_truth.txt` in
//! trajectory format (`t tx ty tz qx qy qz qw`, `#` comments).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::PipelineError;
use crate::deskew::ImuSample;
use crate::geom::{PoseSE3, TimedPose};
use crate::scan::{Scan, ScanPoint};

/// A loaded dataset; scans stay on disk and are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    /// `(stamp, scan file)` ordered by stamp.
    pub scans: Vec<(f64, PathBuf)>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Option<Vec<TimedPose<f64>>>,
}

impl Dataset {
    pub fn scan_count(&self) -> usize {
        self.scans.len()
    }

    /// Read and parse one scan by index.
    pub fn read_scan(&self, index: usize) -> Result<Scan<f64>, PipelineError> {
        let (stamp, path) = &self.scans[index];
        read_scan_file(path, *stamp)
    }
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> PipelineError {
    PipelineError::Parse {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_f64(s: &str, file: &Path, line: usize) -> Result<f64, PipelineError> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("bad number {s:?}")))
}

/// Load a dataset directory, validating the manifest and stream ordering.
pub fn load_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    let manifest_path = dir.join("scans.csv");
    if !manifest_path.exists() {
        return Err(PipelineError::MissingFile(manifest_path));
    }
    let file = std::fs::File::open(&manifest_path)?;
    let mut scans = Vec::new();
    let mut prev_stamp = f64::NEG_INFINITY;
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = idx + 1;
        if n == 1 {
            if line.trim() != "stamp,filename" {
                return Err(parse_err(&manifest_path, 1, "expected header stamp,filename"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some((stamp_s, name)) = line.split_once(',') else {
            return Err(parse_err(&manifest_path, n, "expected stamp,filename"));
        };
        let stamp = parse_f64(stamp_s, &manifest_path, n)?;
        if stamp <= prev_stamp {
            return Err(parse_err(
                &manifest_path,
                n,
                format!("scan stamps not strictly increasing at {stamp}"),
            ));
        }
        prev_stamp = stamp;
        let scan_path = dir.join("scans").join(name.trim());
        if !scan_path.exists() {
            return Err(PipelineError::MissingFile(scan_path));
        }
        scans.push((stamp, scan_path));
    }

    let imu_path = dir.join("imu.csv");
    let imu = if imu_path.exists() {
        read_imu_file(&imu_path)?
    } else {
        Vec::new()
    };

    let gt_path = dir.join("ground_truth.txt");
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };

    Ok(Dataset {
        dir: dir.to_path_buf(),
        scans,
        imu,
        ground_truth,
    })
}

pub fn read_scan_file(path: &Path, stamp: f64) -> Result<Scan<f64>, PipelineError> {
    let file = std::fs::File::open(path)
        .map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
    let mut scan = Scan::new(stamp);
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = idx + 1;
        if n == 1 {
            if line.trim() != "t_offset,x,y,z,intensity,ring" {
                return Err(parse_err(path, 1, "expected header t_offset,x,y,z,intensity,ring"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(path, n, format!("expected 6 fields, got {}", fields.len())));
        }
        let t_offset = parse_f64(fields[0], path, n)?;
        let x = parse_f64(fields[1], path, n)?;
        let y = parse_f64(fields[2], path, n)?;
        let z = parse_f64(fields[3], path, n)?;
        let intensity = parse_f64(fields[4], path, n)?;
        let ring: u16 = fields[5]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, n, format!("bad ring id {:?}", fields[5])))?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(parse_err(path, n, "non-finite coordinate"));
        }
        scan.points.push(ScanPoint {
            position: Vector3::new(x, y, z),
            intensity,
            ring,
            time_offset: t_offset,
        });
    }
    if !scan.validate() {
        return Err(parse_err(path, 0, "per-ring time offsets not non-decreasing"));
    }
    Ok(scan)
}

pub fn read_imu_file(path: &Path) -> Result<Vec<ImuSample>, PipelineError> {
    let file = std::fs::File::open(path)
        .map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = idx + 1;
        if n == 1 {
            if line.trim() != "t,gx,gy,gz,ax,ay,az" {
                return Err(parse_err(path, 1, "expected header t,gx,gy,gz,ax,ay,az"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(path, n, format!("expected 7 fields, got {}", fields.len())));
        }
        let vals: Result<Vec<f64>, _> = fields.iter().map(|f| parse_f64(f, path, n)).collect();
        let v = vals?;
        if v[0] <= prev {
            return Err(parse_err(path, n, "imu stamps not strictly increasing"));
        }
        prev = v[0];
        out.push(ImuSample {
            stamp: v[0],
            gyro: Vector3::new(v[1], v[2], v[3]),
            accel: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

/// Read a trajectory file: `t tx ty tz qx qy qz qw` per line.
pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose<f64>>, PipelineError> {
    let file = std::fs::File::open(path)
        .map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(path, n, format!("expected 8 fields, got {}", fields.len())));
        }
        let vals: Result<Vec<f64>, _> = fields.iter().map(|f| parse_f64(f, path, n)).collect();
        let v = vals?;
        out.push(TimedPose::new(
            v[0],
            PoseSE3::from_wxyz(v[7], v[4], v[5], v[6], Vector3::new(v[1], v[2], v[3])),
        ));
    }
    Ok(out)
}

/// Write a trajectory file (TUM-compatible layout).
pub fn write_trajectory(path: &Path, poses: &[TimedPose<f64>]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# t tx ty tz qx qy qz qw")?;
    for tp in poses {
        let t = tp.pose.translation;
        let q = tp.pose.rotation.as_ref();
        writeln!(
            f,
            "{} {} {} {} {} {} {} {}",
            tp.stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

/// Export points as ASCII PLY with float32 text coordinates.
pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "element vertex {}", points.len())?;
    writeln!(f, "property float x")?;
    writeln!(f, "property float y")?;
    writeln!(f, "property float z")?;
    writeln!(f, "end_header")?;
    for p in points {
        writeln!(f, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
    }
    Ok(())
}
