//! End-to-end exercise of the command-line surface.

use std::path::Path;
use std::process::Command;

fn slam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slam"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_command_flow() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.txt");
    let traj = dir.path().join("traj.txt");
    write(
        &world,
        "# a small yard\nground\nbox -1 3 0 1 4 2\nbox 4 -4 0 6 -3 1.5\nbox 8 2 0 9 3.5 2.5\nbox 12 -3 0 13.5 -2 1.2\n",
    );
    write(
        &traj,
        "# straight run\nheight 0.8\nwaypoint 0 0 0 0\nwaypoint 4 8 0 0\n",
    );

    let data = dir.path().join("data");
    let status = slam()
        .args(["simulate", "--world"])
        .arg(&world)
        .arg("--traj")
        .arg(&traj)
        .args(["--pattern", "mechanical", "--seed", "3"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("scans.csv").exists());
    assert!(data.join("imu.csv").exists());
    assert!(data.join("ground_truth.txt").exists());

    // Loop closure needs a trained model; run without loops here.
    let config = dir.path().join("run.conf");
    write(
        &config,
        "mode = indoor\nloop.enabled = false\npsf.particle_count = 100\npsf.stride = 30\nseed = 4\n",
    );
    let out = dir.path().join("out");
    let output = slam()
        .args(["run", "--dataset"])
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("trajectory.txt").exists());
    assert!(out.join("map.ply").exists());

    let eval = slam()
        .args(["evaluate", "--est"])
        .arg(out.join("trajectory.txt"))
        .arg("--gt")
        .arg(data.join("ground_truth.txt"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.starts_with("ate_rmse="), "got {text}");

    let bench = slam()
        .args(["bench-nn", "--n", "2000", "--q", "200", "--k", "5", "--seed", "1"])
        .output()
        .unwrap();
    assert!(bench.status.success());
    let text = String::from_utf8_lossy(&bench.stdout);
    assert!(text.contains("speedup="), "got {text}");
}

#[test]
fn bad_config_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    write(&config, "no.such.key = 1\n");
    let status = slam()
        .args(["run", "--dataset"])
        .arg(dir.path())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn missing_dataset_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    write(&config, "mode = indoor\nloop.enabled = false\n");
    let status = slam()
        .args(["run", "--dataset"])
        .arg(dir.path().join("nowhere"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}
