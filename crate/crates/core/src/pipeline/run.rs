//! The batch SLAM run: deskew, features, scan-to-map odometry, the particle
//! filter cycle, keyframing, loop closure, and pose-graph updates, with all
//! artifacts written to an output directory.

use std::path::Path;

use nalgebra::{Matrix6, UnitQuaternion, Vector3};

use super::config::{Config, SensorKind};
use super::dataset::{load_dataset, write_ply, write_trajectory, Dataset};
use super::map::{voxel_downsample, KeyframeStore};
use super::metrics::{evaluate, Metrics};
use super::PipelineError;
use crate::deskew::{deskew_constant_velocity, deskew_scan, preintegrate_track, ImuSample};
use crate::features::{extract_features_with, FeatureCloud, RingLayout};
use crate::geom::{se3_exp, se3_log, Pose2D, PoseSE3, TimedPose};
use crate::loopnet::{
    compute_descriptor, regress_yaw, shift_profile, verify_candidate, LoopCandidate, LoopModel,
    VerifyParams,
};
use crate::pose_graph::{FactorKind, PoseGraph, RobustKernel};
use crate::psf::{localize_cycle, LikelihoodModel, MotionIncrement, ProposalConfig};
use crate::scan::Scan;
use crate::scan_match::{match_scan_to_map, LocalMap, MatchParams, MatchResult};

/// Outputs of a SLAM run.
#[derive(Debug)]
pub struct RunArtifacts {
    /// Per-scan poses, consistent with the final keyframe estimates.
    pub trajectory: Vec<TimedPose<f64>>,
    pub metrics: Option<Metrics>,
    pub keyframes: usize,
    pub loop_factors: usize,
    pub gps_factors: usize,
    pub scan_match_fallbacks: usize,
    pub diagnostics: Vec<String>,
    /// Final voxel-downsampled map points, world frame.
    pub map_points: Vec<Vector3<f64>>,
}

fn info6(rot: f64, trans: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = rot;
        m[(i + 3, i + 3)] = trans;
    }
    m
}

/// Roll/pitch attitude from the mean specific force over the first window of
/// IMU samples (gravity alignment; yaw is unobservable and set to zero).
fn gravity_alignment(imu: &[ImuSample], window: f64) -> UnitQuaternion<f64> {
    if imu.is_empty() {
        return UnitQuaternion::identity();
    }
    let t0 = imu[0].stamp;
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for s in imu.iter().take_while(|s| s.stamp <= t0 + window) {
        sum += s.accel;
        n += 1;
    }
    if n == 0 {
        return UnitQuaternion::identity();
    }
    let a = sum / n as f64;
    let roll = a.y.atan2(a.z);
    let pitch = (-a.x).atan2((a.y * a.y + a.z * a.z).sqrt());
    UnitQuaternion::from_euler_angles(roll, pitch, 0.0)
}

/// IMU samples covering `[t0, t1]`, or `None` when the stream cannot.
fn imu_slice(imu: &[ImuSample], t0: f64, t1: f64) -> Option<&[ImuSample]> {
    if imu.len() < 2 {
        return None;
    }
    let start = imu.partition_point(|s| s.stamp <= t0).saturating_sub(1);
    let end = imu.partition_point(|s| s.stamp < t1) + 1;
    let end = end.min(imu.len());
    let slice = &imu[start..end];
    if slice.len() >= 2 && slice[0].stamp <= t0 + 1e-9 && slice[slice.len() - 1].stamp >= t1 - 1e-9
    {
        Some(slice)
    } else {
        None
    }
}

struct SlamState {
    store: KeyframeStore,
    graph: PoseGraph<f64>,
    local_map: Option<LocalMap<f64>>,
    current_pose: PoseSE3<f64>,
    last_pose: PoseSE3<f64>,
    prev_rel: PoseSE3<f64>,
    prev_translation: Option<(f64, Vector3<f64>)>,
    velocity: Vector3<f64>,
    cycle_buffer: Vec<(Scan<f64>, MotionIncrement<f64>)>,
    cycle_start: Pose2D<f64>,
    cycle_index: usize,
    /// Per scan: stamp, parent keyframe, pose relative to that keyframe.
    scan_anchors: Vec<(f64, usize, PoseSE3<f64>)>,
    last_features: Option<FeatureCloud<f64>>,
    loop_pairs: std::collections::HashSet<(usize, usize)>,
    diagnostics: Vec<String>,
    fallbacks: usize,
}

/// Run the full pipeline over a dataset directory.
///
/// Artifacts (trajectory, map, diagnostics, metrics when ground truth is
/// available) are written into `out_dir` when given — also on
/// localization-lost aborts, where the partial outputs are flushed before
/// the error returns.
pub fn run_slam(
    dataset_dir: &Path,
    config: &Config,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, PipelineError> {
    let dataset = load_dataset(dataset_dir)?;
    let model = if config.loop_enabled {
        let Some(path) = &config.loop_model else {
            return Err(PipelineError::MissingLoopModel);
        };
        Some(LoopModel::load_from_path(path)?)
    } else {
        None
    };
    let result = run_loaded(&dataset, config, model.as_ref());
    match result {
        Ok(mut artifacts) => {
            artifacts.metrics = match &dataset.ground_truth {
                Some(gt) if artifacts.trajectory.len() >= 2 => {
                    evaluate(&artifacts.trajectory, gt).ok()
                }
                _ => None,
            };
            if let Some(dir) = out_dir {
                write_artifacts(dir, &artifacts)?;
            }
            Ok(artifacts)
        }
        Err((partial, err)) => {
            if let (Some(dir), Some(artifacts)) = (out_dir, partial) {
                let _ = write_artifacts(dir, &artifacts);
            }
            Err(err)
        }
    }
}

fn write_artifacts(dir: &Path, artifacts: &RunArtifacts) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    write_trajectory(&dir.join("trajectory.txt"), &artifacts.trajectory)?;
    write_ply(&dir.join("map.ply"), &artifacts.map_points)?;
    std::fs::write(
        dir.join("diagnostics.txt"),
        artifacts.diagnostics.join("\n") + "\n",
    )?;
    if let Some(m) = &artifacts.metrics {
        std::fs::write(
            dir.join("metrics.txt"),
            format!(
                "ate_rmse={}\nrpe_trans={}\nrpe_rot_deg={}\npairs={}\n",
                m.ate_rmse, m.rpe_translation, m.rpe_rotation_deg, m.associated_pairs
            ),
        )?;
    }
    Ok(())
}

type RunError = (Option<RunArtifacts>, PipelineError);

fn run_loaded(
    dataset: &Dataset,
    config: &Config,
    model: Option<&LoopModel>,
) -> Result<RunArtifacts, RunError> {
    let ring_layout = match config.sensor_pattern {
        SensorKind::Mechanical => RingLayout::FromIds,
        SensorKind::SolidState => RingLayout::ElevationBins { bin_deg: 1.0 },
    };
    let match_params = MatchParams::default();
    let mut state = SlamState {
        store: KeyframeStore::new(),
        graph: PoseGraph::new(),
        local_map: None,
        current_pose: PoseSE3::identity(),
        last_pose: PoseSE3::identity(),
        prev_rel: PoseSE3::identity(),
        prev_translation: None,
        velocity: Vector3::zeros(),
        cycle_buffer: Vec::new(),
        cycle_start: Pose2D::default(),
        cycle_index: 0,
        scan_anchors: Vec::new(),
        last_features: None,
        loop_pairs: Default::default(),
        diagnostics: Vec::new(),
        fallbacks: 0,
    };
    let mut loop_factors = 0usize;

    let initial_attitude = gravity_alignment(&dataset.imu, 0.5);
    state.current_pose = PoseSE3 {
        rotation: initial_attitude,
        translation: Vector3::zeros(),
    };
    state.last_pose = state.current_pose;

    for index in 0..dataset.scan_count() {
        let raw = dataset.read_scan(index).map_err(|e| (None, e))?;
        let scan_dt = if index > 0 {
            raw.stamp - dataset.scans[index - 1].0
        } else {
            0.1
        };
        let predicted = state.current_pose.compose(&state.prev_rel);

        // Motion-distortion correction into the sweep-start frame, then
        // scan-to-map odometry. When the matched motion disagrees with the
        // velocity the correction assumed, the scan is re-deskewed with the
        // measured velocity and matched once more; without that damping the
        // deskew-to-odometry feedback loop oscillates.
        let deskewed_with = |velocity: Vector3<f64>,
                             prev_rel: &PoseSE3<f64>|
         -> Result<Scan<f64>, crate::deskew::DeskewError> {
            let duration = raw.duration();
            if duration <= 0.0 {
                let mut s = raw.clone();
                s.deskewed = true;
                return Ok(s);
            }
            if let Some(slice) = imu_slice(&dataset.imu, raw.stamp, raw.stamp + duration) {
                if let Ok(track) = preintegrate_track(
                    slice,
                    raw.stamp,
                    raw.stamp + duration,
                    predicted.rotation,
                    velocity,
                ) {
                    return deskew_scan(&raw, |t| track.relative_pose_at(t));
                }
            }
            constant_velocity_fallback(&raw, prev_rel, scan_dt)
        };

        let mut deskewed = deskewed_with(state.velocity, &state.prev_rel)
            .map_err(|e| (None, PipelineError::Deskew(e)))?;
        let mut features = extract_features_with(&deskewed, ring_layout, &config.features)
            .map_err(|e| (None, PipelineError::Feature(e)))?;

        if state.store.is_empty() {
            bootstrap(&mut state, config, &deskewed, features);
            continue;
        }

        let match_once = |features: &FeatureCloud<f64>,
                          fallbacks: &mut usize|
         -> PoseSE3<f64> {
            match &state.local_map {
                // A non-degenerate result is used even when the step
                // tolerance was not reached; it still beats dead reckoning.
                Some(map) => match match_scan_to_map(features, map, &predicted, &match_params) {
                    Ok(MatchResult {
                        pose,
                        degenerate: false,
                        ..
                    }) => pose,
                    _ => {
                        *fallbacks += 1;
                        predicted
                    }
                },
                None => predicted,
            }
        };
        let mut fallbacks = 0usize;
        let mut new_pose = match_once(&features, &mut fallbacks);
        if scan_dt > 1e-6 {
            let measured_velocity =
                (new_pose.translation - state.current_pose.translation) / scan_dt;
            if (measured_velocity - state.velocity).norm() > 0.3 {
                let measured_rel = state.current_pose.between(&new_pose);
                if let Ok(redone) = deskewed_with(measured_velocity, &measured_rel) {
                    if let Ok(refeat) =
                        extract_features_with(&redone, ring_layout, &config.features)
                    {
                        deskewed = redone;
                        features = refeat;
                        new_pose = match_once(&features, &mut fallbacks);
                    }
                }
            }
        }
        state.fallbacks += fallbacks;
        let u = MotionIncrement {
            delta: Pose2D::from_se3(&state.current_pose).between(&Pose2D::from_se3(&new_pose)),
            sigma_x: config.psf_sigma_x,
            sigma_y: config.psf_sigma_y,
            sigma_yaw: config.psf_sigma_yaw,
        };
        // Velocity from finite differences of consecutive odometry poses.
        if let Some((pt, tr)) = state.prev_translation {
            let dt = raw.stamp - pt;
            if dt > 1e-6 {
                state.velocity = (new_pose.translation - tr) / dt;
            }
        }
        state.prev_translation = Some((raw.stamp, new_pose.translation));
        state.prev_rel = state.current_pose.between(&new_pose);
        state.last_pose = state.current_pose;
        state.current_pose = new_pose;

        if state.cycle_buffer.is_empty() {
            state.cycle_start = Pose2D::from_se3(&state.last_pose);
        }
        state.cycle_buffer.push((deskewed.clone(), u));
        state.last_features = Some(features.clone());

        // Localization cycle: after `steps_per_cycle` scans, re-estimate and
        // refresh the local map.
        if state.cycle_buffer.len() >= config.psf.steps_per_cycle {
            run_cycle(&mut state, config, &match_params).map_err(|e| {
                let artifacts = collect_artifacts(&state, loop_factors, &state.diagnostics);
                (Some(artifacts), e)
            })?;
        }

        // Keyframe policy, graph growth, loop closure.
        if state.store.should_insert(
            &state.current_pose,
            config.keyframe_min_translation,
            config.keyframe_min_rotation_deg,
        ) {
            let new_id = insert_keyframe(&mut state, config, &deskewed, features.clone());
            if let Some(model) = model {
                loop_factors += close_loops(&mut state, config, model, new_id, &match_params);
            }
        }

        let kf_id = state.store.last().expect("bootstrapped").id;
        let rel = state.store.get(kf_id).unwrap().pose.between(&state.current_pose);
        state.scan_anchors.push((raw.stamp, kf_id, rel));
    }

    Ok(collect_artifacts(&state, loop_factors, &state.diagnostics))
}

fn constant_velocity_fallback(
    raw: &Scan<f64>,
    prev_rel: &PoseSE3<f64>,
    scan_dt: f64,
) -> Result<Scan<f64>, crate::deskew::DeskewError> {
    let duration = raw.duration();
    // Scale the per-scan relative motion to the sweep duration and invert:
    // the scene appears to move opposite to the sensor.
    let scale = if scan_dt > 1e-9 {
        (duration / scan_dt).clamp(0.0, 2.0)
    } else {
        1.0
    };
    let ego_sweep = match se3_log(prev_rel) {
        Ok(twist) => se3_exp(&twist.scaled(scale)),
        Err(_) => *prev_rel,
    };
    deskew_constant_velocity(raw, &ego_sweep.inverse())
}

fn bootstrap(
    state: &mut SlamState,
    config: &Config,
    scan: &Scan<f64>,
    features: FeatureCloud<f64>,
) {
    let descriptor = compute_descriptor(scan);
    let id = state
        .store
        .insert(scan.stamp, state.current_pose, features, descriptor);
    state
        .graph
        .add_node(id, state.current_pose, true)
        .expect("fresh node");
    state
        .graph
        .add_prior_factor(id, state.current_pose, info6(1e6, 1e6))
        .expect("valid prior");
    state.local_map = state.store.update_local_map(
        &state.current_pose.translation,
        config.map_radius,
        config.voxel_edge,
        config.voxel_planar,
    );
    state.scan_anchors.push((scan.stamp, id, PoseSE3::identity()));
    state.cycle_start = Pose2D::from_se3(&state.current_pose);
}

fn run_cycle(
    state: &mut SlamState,
    config: &Config,
    match_params: &MatchParams,
) -> Result<(), PipelineError> {
    let Some(map) = &state.local_map else {
        state.cycle_buffer.clear();
        return Ok(());
    };
    let (_, _, roll_pitch) = {
        let (r, p, _) = state.current_pose.rotation.euler_angles();
        (r, p, (r, p))
    };
    let likelihood = LikelihoodModel {
        sigma: config.likelihood_sigma,
        stride: config.likelihood_stride,
        lift_z: state.current_pose.translation.z,
        lift_roll: roll_pitch.0,
        lift_pitch: roll_pitch.1,
        max_match_dist: 1.0,
    };
    let cfg = ProposalConfig {
        steps_per_cycle: state.cycle_buffer.len(),
        ..config.psf
    };
    let seed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(state.cycle_index as u64);
    let outcome = localize_cycle(
        &state.cycle_buffer,
        &state.cycle_start,
        map,
        &cfg,
        &likelihood,
        seed,
        state.last_features.as_ref(),
        match_params,
    );
    match outcome {
        Ok(result) => {
            state
                .diagnostics
                .push(result.diagnostics_line(state.cycle_index));
            let refined_pose = match (&result.refined, cfg.mode) {
                (Some(m), _) => Some(m.pose),
                // Plain motion-model proposal: the particle mean is the
                // estimate. In refined mode a failed refinement keeps the
                // scan-match odometry pose instead of the noisier mean.
                (None, crate::psf::ProposalMode::MotionModel) => Some(result.estimate.to_se3_with(
                    likelihood.lift_z,
                    likelihood.lift_roll,
                    likelihood.lift_pitch,
                )),
                (None, crate::psf::ProposalMode::ScanMatchRefined) => None,
            };
            if let Some(pose) = refined_pose {
                state.prev_rel = state.last_pose.between(&pose);
                state.current_pose = pose;
            }
            state.cycle_index += 1;
            state.cycle_buffer.clear();
            // Map update closes the localize-then-remap cadence.
            state.local_map = state.store.update_local_map(
                &state.current_pose.translation,
                config.map_radius,
                config.voxel_edge,
                config.voxel_planar,
            );
            Ok(())
        }
        Err(crate::psf::PsfError::LocalizationLost { last_estimate }) => {
            Err(PipelineError::LocalizationLost {
                scan_index: state.scan_anchors.len(),
                last_estimate,
            })
        }
        Err(e) => Err(PipelineError::Psf(e)),
    }
}

fn insert_keyframe(
    state: &mut SlamState,
    config: &Config,
    scan: &Scan<f64>,
    features: FeatureCloud<f64>,
) -> usize {
    let descriptor = compute_descriptor(scan);
    let prev_id = state.store.last().expect("bootstrapped").id;
    let prev_pose = state.store.get(prev_id).unwrap().pose;
    let id = state
        .store
        .insert(scan.stamp, state.current_pose, features, descriptor);
    state
        .graph
        .add_node(id, state.current_pose, false)
        .expect("fresh node");
    state
        .graph
        .add_odometry_factor(
            prev_id,
            id,
            prev_pose.between(&state.current_pose),
            info6(1e4, 400.0),
        )
        .expect("consecutive keyframes");
    state.local_map = state.store.update_local_map(
        &state.current_pose.translation,
        config.map_radius,
        config.voxel_edge,
        config.voxel_planar,
    );
    id
}

/// Detect, verify, and apply loop closures for a freshly inserted keyframe.
/// Returns the number of accepted loop factors.
fn close_loops(
    state: &mut SlamState,
    config: &Config,
    model: &LoopModel,
    query: usize,
    _match_params: &MatchParams,
) -> usize {
    if query < config.loop_gate {
        return 0;
    }
    let mut accepted = 0usize;
    let descriptors: Vec<_> = state.store.iter().map(|k| k.descriptor.clone()).collect();
    let mut candidates: Vec<LoopCandidate> = Vec::new();
    for m in 0..=query - config.loop_gate {
        let Ok(profile) = shift_profile(&descriptors[query], &descriptors[m]) else {
            continue;
        };
        let p = model.forward(&profile);
        if p >= config.loop_threshold {
            candidates.push(LoopCandidate {
                query,
                matched: m,
                probability: p,
                relative_yaw: regress_yaw(&profile, model.temperature),
                verified_relative: None,
                verification_residual: f64::INFINITY,
            });
        }
    }
    if candidates.is_empty() {
        return 0;
    }
    // Strongest candidate first; one accepted loop per keyframe is enough.
    candidates.sort_by(|a, b| b.probability.partial_cmp(&a.probability).unwrap());
    let poses = state.store.poses();
    let features: Vec<FeatureCloud<f64>> =
        state.store.iter().map(|k| k.features.clone()).collect();
    for candidate in candidates.iter().take(3) {
        if state
            .loop_pairs
            .contains(&(candidate.matched, candidate.query))
        {
            continue;
        }
        let verified = verify_candidate(
            candidate,
            &poses,
            &features,
            |ids| state.store.build_map(ids, config.voxel_edge, config.voxel_planar),
            &VerifyParams::default(),
        );
        let Some(relative) = verified.verified_relative else {
            continue;
        };
        if state
            .graph
            .add_loop_factor(
                candidate.matched,
                candidate.query,
                relative,
                info6(1e4, 400.0),
                RobustKernel::Huber(1.0),
            )
            .is_err()
        {
            continue;
        }
        state.loop_pairs.insert((candidate.matched, candidate.query));
        accepted += 1;

        let before_last = state.store.last().unwrap().pose;
        if state.graph.optimize(50, 1e-8).is_ok() {
            // Propagate optimized poses into the store and the live estimate.
            for id in 0..state.store.len() {
                let pose = state.graph.node(id).unwrap().pose;
                state.store.set_pose(id, pose);
            }
            let after_last = state.store.last().unwrap().pose;
            let correction = after_last.compose(&before_last.inverse());
            state.current_pose = correction.compose(&state.current_pose);
            state.last_pose = correction.compose(&state.last_pose);
            state.cycle_start =
                Pose2D::from_se3(&correction.compose(&state.cycle_start.to_se3_with(
                    state.current_pose.translation.z,
                    0.0,
                    0.0,
                )));
            state.local_map = state.store.update_local_map(
                &state.current_pose.translation,
                config.map_radius,
                config.voxel_edge,
                config.voxel_planar,
            );
        }
        break;
    }
    accepted
}

fn collect_artifacts(
    state: &SlamState,
    loop_factors: usize,
    diagnostics: &[String],
) -> RunArtifacts {
    let map_points = export_map(&state.store, 0.2);
    let trajectory: Vec<TimedPose<f64>> = state
        .scan_anchors
        .iter()
        .map(|(stamp, kf, rel)| {
            let pose = state.store.get(*kf).map(|k| k.pose).unwrap_or_default();
            TimedPose::new(*stamp, pose.compose(rel))
        })
        .collect();
    RunArtifacts {
        trajectory,
        metrics: None,
        keyframes: state.store.len(),
        loop_factors,
        gps_factors: state.graph.factor_count_of(FactorKind::Gps),
        scan_match_fallbacks: state.fallbacks,
        diagnostics: diagnostics.to_vec(),
        map_points,
    }
}

/// Final map export: union of keyframe features, voxel-downsampled.
pub fn export_map(store: &KeyframeStore, voxel: f64) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for kf in store.iter() {
        for p in kf.features.edges.iter().chain(kf.features.planars.iter()) {
            points.push(kf.pose.transform_point(p));
        }
    }
    voxel_downsample(&points, voxel)
}
