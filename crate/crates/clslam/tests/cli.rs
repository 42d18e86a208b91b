//! End-to-end checks of the command-line interface: exit codes, emitted
//! files, and determinism of `run` across invocations.

use clslam::report::read_report;
use std::path::Path;
use std::process::{Command, Output};

fn clslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clslam")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn small_config() -> String {
    r#"
master_seed = 9

[camera]
fx = 14.0
fy = 14.0
cx = 8.0
cy = 6.0
width = 16
height = 12

[network]
c1 = 2
c2 = 3

[pretraining]
env_id = 0
scene_id = 0
epochs = 1

[adaptation]
cycles = 1

[metrics]
segment_lengths = [2.0, 4.0]

[[environments]]
env_id = 0
texture_seed = 10
texture_frequency = 0.5
texture_contrast = 0.8
illumination_gain = 1.0
illumination_bias = 0.0
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [9.0, 11.0]

[[environments]]
env_id = 1
texture_seed = 20
texture_frequency = 1.4
texture_contrast = 0.4
illumination_gain = 0.8
illumination_bias = 0.1
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [4.0, 6.0]

[[environments]]
env_id = 2
texture_seed = 30
texture_frequency = 0.9
texture_contrast = 0.9
illumination_gain = 1.1
illumination_bias = 0.0
box_density = 0.0
box_heights = [0.6, 2.2]
velocity_range = [14.0, 16.0]

[[scenes]]
env_id = 0
scene_id = 0
waypoint_seed = 100
length = 8.0
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 1
scene_id = 0
waypoint_seed = 110
length = 8.0
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 1
scene_id = 1
waypoint_seed = 111
length = 8.0
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 2
scene_id = 0
waypoint_seed = 120
length = 8.0
curvature = [-0.04, 0.04]

[[scenes]]
env_id = 2
scene_id = 1
waypoint_seed = 121
length = 8.0
curvature = [-0.04, 0.04]
"#
    .to_string()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, small_config()).unwrap();
    path.display().to_string()
}

#[test]
fn bad_inputs_exit_with_config_errors() {
    let out = clslam(&["run", "--config", "/nonexistent/experiment.toml"]);
    assert_eq!(code(&out), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, small_config().replace("texture_contrast = 0.8", "texture_contrast = 9.0"))
        .unwrap();
    let out = clslam(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("contrast"));

    let config = write_config(dir.path());
    let out = clslam(&["run", "--config", &config, "--methods", "warp_drive"]);
    assert_eq!(code(&out), 1);

    let out = clslam(&["eval", "--gt", "/nonexistent/a.txt", "--est", "/nonexistent/b.txt"]);
    assert_eq!(code(&out), 1);

    let out = clslam(&["frobnicate"]);
    assert_eq!(code(&out), 1);

    let out = clslam(&["--help"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn gen_writes_readable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = clslam(&["gen", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let scene_dir = out_dir.join("datasets").join("e1s0");
    let loaded = clslam::dataset::read_dataset(&scene_dir).unwrap();
    assert!(loaded.has_ground_truth());
    assert!(!loaded.timestamps.is_empty());

    // The ground-truth file scores perfectly against itself.
    let poses = scene_dir.join("poses_gt.txt");
    let out = clslam(&[
        "eval",
        "--gt",
        poses.to_str().unwrap(),
        "--est",
        poses.to_str().unwrap(),
        "--lengths",
        "2,4",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("t_err_pct 0"), "stdout: {stdout}");
}

#[test]
fn run_emits_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = clslam(&[
            "run",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
            "--methods",
            "fixed,cl_slam",
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("report.csv").exists());
        assert!(out_dir.join("report.txt").exists());
        assert!(out_dir.join("checkpoints").join("pretrained_depth.tnet").exists());
        assert!(std::fs::read_dir(out_dir.join("logs")).unwrap().count() > 0);
    }

    let table_a = read_report(&out_a.join("report.json")).unwrap();
    let table_b = read_report(&out_b.join("report.json")).unwrap();
    assert_eq!(table_a.meta.methods, vec!["cl_slam".to_string(), "fixed".to_string()]);
    assert_eq!(
        clslam::report::comparable(&table_a),
        clslam::report::comparable(&table_b),
        "same config and seed must reproduce the report"
    );

    // A different seed changes the run and its hash.
    let out = clslam(&[
        "run",
        "--config",
        &config,
        "--out",
        dir.path().join("c").to_str().unwrap(),
        "--methods",
        "fixed",
        "--seed",
        "123",
    ]);
    assert_eq!(code(&out), 0);
    let table_c = read_report(&dir.path().join("c").join("report.json")).unwrap();
    assert_ne!(table_c.meta.config_hash, table_a.meta.config_hash);

    // The table subcommand re-renders the stored report.
    let out = clslam(&["table", "--report", out_a.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("AQ (t / r)"));
    assert!(stdout.contains("cl_slam"));
}
