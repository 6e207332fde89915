//! Command-line driver: dataset simulation, SLAM runs, trajectory
//! evaluation, the nearest-neighbor benchmark, and loop-model training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use slam_core::geom::Pose2D;
use slam_core::loopnet;
use slam_core::nn;
use slam_core::pipeline::{self, Config, PipelineError};
use slam_core::sim::{generate_dataset, Aabb, NoiseSpec, ScanPattern, TrajectorySpec, WorldSpec};

#[derive(Parser)]
#[command(name = "slam", version, about = "LiDAR-inertial SLAM pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Mechanical,
    Solidstate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a world and trajectory file.
    Simulate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, value_enum)]
        pattern: PatternArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// IMU sample rate, Hz.
        #[arg(long, default_value_t = 200.0)]
        imu_rate: f64,
        /// Range noise sigma, meters.
        #[arg(long, default_value_t = 0.01)]
        range_sigma: f64,
    },
    /// Run the SLAM pipeline over a dataset.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Benchmark k-d tree queries against an exhaustive scan.
    BenchNn {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        q: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the loop-closure model from a dataset with ground truth.
    TrainLoop {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use every stride-th scan when building pairs.
        #[arg(long, default_value_t = 5)]
        stride: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<PipelineError>()
                .map(|e| e.exit_code())
                .unwrap_or(1);
            ExitCode::from(code.clamp(0, 255) as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            world,
            traj,
            pattern,
            out,
            seed,
            imu_rate,
            range_sigma,
        } => simulate(&world, &traj, pattern, &out, seed, imu_rate, range_sigma),
        Command::Run {
            dataset,
            config,
            out,
        } => run(&dataset, &config, &out),
        Command::Evaluate { est, gt } => evaluate(&est, &gt),
        Command::BenchNn { n, q, k, seed } => {
            let report = nn::bench(n, q, k, seed);
            println!("{report}");
            Ok(())
        }
        Command::TrainLoop {
            dataset,
            epochs,
            lr,
            seed,
            out,
            stride,
        } => train_loop(&dataset, epochs, lr, seed, &out, stride),
    }
}

fn simulate(
    world_path: &Path,
    traj_path: &Path,
    pattern: PatternArg,
    out: &Path,
    seed: u64,
    imu_rate: f64,
    range_sigma: f64,
) -> Result<()> {
    let world = parse_world(world_path)?;
    let traj = parse_trajectory(traj_path)?;
    let pattern = match pattern {
        PatternArg::Mechanical => ScanPattern::mechanical_default(),
        PatternArg::Solidstate => ScanPattern::solid_state_default(),
    };
    let noise = NoiseSpec {
        range_sigma,
        gyro_noise_density: 1e-4,
        accel_noise_density: 1e-3,
    };
    let manifest = generate_dataset(&world, &traj, &pattern, imu_rate, &noise, seed, out)
        .with_context(|| "dataset generation failed")?;
    println!(
        "wrote {} scans and {} imu samples to {}",
        manifest.scan_count(),
        manifest.imu_count,
        out.display()
    );
    Ok(())
}

fn run(dataset: &Path, config_path: &Path, out: &Path) -> Result<()> {
    let config = Config::from_file(config_path)?;
    let artifacts = pipeline::run_slam(dataset, &config, Some(out))?;
    println!(
        "scans={} keyframes={} loop_factors={} fallbacks={}",
        artifacts.trajectory.len(),
        artifacts.keyframes,
        artifacts.loop_factors,
        artifacts.scan_match_fallbacks
    );
    if let Some(m) = &artifacts.metrics {
        println!(
            "ate_rmse={} rpe_trans={} rpe_rot_deg={} pairs={}",
            m.ate_rmse, m.rpe_translation, m.rpe_rotation_deg, m.associated_pairs
        );
    }
    Ok(())
}

fn evaluate(est: &Path, gt: &Path) -> Result<()> {
    let est_traj = pipeline::read_trajectory(est)?;
    let gt_traj = pipeline::read_trajectory(gt)?;
    let m = pipeline::evaluate(&est_traj, &gt_traj)?;
    println!(
        "ate_rmse={} rpe_trans={} rpe_rot_deg={} pairs={}",
        m.ate_rmse, m.rpe_translation, m.rpe_rotation_deg, m.associated_pairs
    );
    Ok(())
}

fn train_loop(
    dataset_dir: &Path,
    epochs: usize,
    lr: f64,
    seed: u64,
    out: &Path,
    stride: usize,
) -> Result<()> {
    let dataset = pipeline::load_dataset(dataset_dir)?;
    let Some(gt) = &dataset.ground_truth else {
        bail!("training requires ground_truth.txt in the dataset");
    };
    let stride = stride.max(1);
    let mut descriptors = Vec::new();
    let mut poses = Vec::new();
    for i in (0..dataset.scan_count()).step_by(stride) {
        let scan = dataset.read_scan(i)?;
        descriptors.push(loopnet::compute_descriptor(&scan));
        poses.push(gt[i].pose);
    }
    let pairs = loopnet::label_pairs(&descriptors, &poses, 10, 3.0, 6.0, 2000, seed);
    println!("labeled {} pairs from {} keyframes", pairs.len(), poses.len());
    let outcome = loopnet::train(&pairs, epochs, lr, seed)?;
    outcome.model.save_to_path(out)?;
    println!(
        "trained: epochs={} final_loss={} temperature={} val_yaw_mae_deg={:?}",
        outcome.loss_history.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        outcome.model.temperature,
        outcome.validation_yaw_mae.map(|m| m.to_degrees())
    );
    println!("model written to {}", out.display());
    Ok(())
}

/// World file: `ground` lines enable the ground plane; `box x0 y0 z0 x1 y1 z1`
/// lines add axis-aligned boxes. `#` starts a comment.
fn parse_world(path: &Path) -> Result<WorldSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading world file {}", path.display()))?;
    let mut world = WorldSpec::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("ground") => world.ground = true,
            Some("box") => {
                let nums: Vec<f64> = fields
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("{}:{}: bad box numbers", path.display(), idx + 1))?;
                if nums.len() != 6 {
                    bail!("{}:{}: box needs 6 numbers", path.display(), idx + 1);
                }
                world.boxes.push(Aabb::from_corners(
                    nums[0], nums[1], nums[2], nums[3], nums[4], nums[5],
                ));
            }
            Some(other) => bail!("{}:{}: unknown entry {other:?}", path.display(), idx + 1),
            None => {}
        }
    }
    world.validate().with_context(|| "invalid world")?;
    Ok(world)
}

/// Trajectory file: `height <m>`, optional `loop` flag, and
/// `waypoint <t> <x> <y> <yaw_rad>` lines. `#` starts a comment.
fn parse_trajectory(path: &Path) -> Result<TrajectorySpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading trajectory file {}", path.display()))?;
    let mut waypoints = Vec::new();
    let mut closed_loop = false;
    let mut height = 0.8;
    for (idx, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("loop") => closed_loop = true,
            Some("height") => {
                height = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .with_context(|| format!("{}:{}: bad height", path.display(), idx + 1))?;
            }
            Some("waypoint") => {
                let nums: Vec<f64> = fields
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| {
                        format!("{}:{}: bad waypoint numbers", path.display(), idx + 1)
                    })?;
                if nums.len() != 4 {
                    bail!("{}:{}: waypoint needs t x y yaw_rad", path.display(), idx + 1);
                }
                waypoints.push((nums[0], Pose2D::new(nums[1], nums[2], nums[3])));
            }
            Some(other) => bail!("{}:{}: unknown entry {other:?}", path.display(), idx + 1),
            None => {}
        }
    }
    let spec = TrajectorySpec::new(waypoints, closed_loop, height);
    spec.validate().with_context(|| "invalid trajectory")?;
    Ok(spec)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}
