//! Synthetic scene on disk through the pipeline, evaluation and export.

use std::path::Path;

use gcvd_core::config::RunConfig;
use gcvd_core::exec::Executor;
use gcvd_core::io::scene::validate_scene;
use gcvd_core::pipeline::{evaluate_dirs, export_point_clouds, read_run_dir, run_scene};
use gcvd_core::synth::{generate, SceneSpec, SyntheticScene};

fn small_spec() -> SceneSpec {
    SceneSpec {
        seed: 3,
        frames: 16,
        width: 32,
        height: 24,
        ..SceneSpec::default()
    }
}

fn write_scene(root: &Path) -> SyntheticScene {
    let scene = generate(&small_spec(), &Executor::sequential()).unwrap();
    scene.write(root, false).unwrap();
    scene
}

#[test]
fn written_scene_meets_the_counting_contract() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("scene");
    write_scene(&root);
    let c = validate_scene(&root).unwrap();
    assert_eq!(c.frames, 16);
    assert_eq!(c.depths, 16);
    assert_eq!(c.masks, 16);
    assert_eq!(c.forward_flows, 15);
    assert_eq!(c.backward_flows, 15);
}

#[test]
fn writing_over_a_scene_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("scene");
    let scene = write_scene(&root);
    let err = scene.write(&root, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    scene.write(&root, true).unwrap();
}

#[test]
fn ground_truth_evaluates_to_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("scene");
    write_scene(&root);
    let rep = evaluate_dirs(&root.join("gt"), &root, 1).unwrap();
    assert_eq!(rep.frames, 16);
    assert!(rep.ate < 1e-6, "ate {}", rep.ate);
    assert!(rep.rpe.trans_rmse < 1e-6);
    let d = rep.depth.expect("depth metrics");
    assert!(d.abs_rel < 1e-6);
    assert_eq!(d.delta1, 1.0);
}

#[test]
fn run_recovers_a_small_scene_and_exports_points() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("scene");
    let scene = write_scene(&root);
    let out = dir.path().join("run");
    let cfg = RunConfig::default();
    let exec = Executor::sequential();
    let result = run_scene(&root, &out, &cfg, false, &exec).unwrap();
    assert_eq!(result.poses.len(), 16);
    for name in ["trajectory.txt", "report.txt", "config.txt", "frames.meta"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }

    let back = read_run_dir(&out).unwrap();
    assert_eq!(back.poses.len(), 16);
    assert_eq!(back.depths.len(), 16);

    let rep = evaluate_dirs(&out, &root, 1).unwrap();
    assert!(
        rep.ate <= 0.02 * scene.extent(),
        "ate {} extent {}",
        rep.ate,
        scene.extent()
    );
    let depth = rep.depth.expect("depth metrics");
    assert!(depth.abs_rel < 0.05, "abs_rel {}", depth.abs_rel);

    let err = run_scene(&root, &out, &cfg, false, &exec).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let files = export_point_clouds(&out, &[0, 15], &dir.path().join("points")).unwrap();
    assert_eq!(files.len(), 2);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().count(), 32 * 24);
    assert!(export_point_clouds(&out, &[16], &dir.path().join("points")).is_err());
}

#[test]
fn missing_scene_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_scene(
        &dir.path().join("absent"),
        &dir.path().join("run"),
        &RunConfig::default(),
        false,
        &Executor::sequential(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
