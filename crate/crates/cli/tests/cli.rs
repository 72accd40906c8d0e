//! Exit codes and artifact hand-off between verbs.

use std::path::Path;
use std::process::{Command, Output};

fn rayprior(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rayprior"));
    cmd.args(args)
        .arg("--set")
        .arg(format!("out_dir={}", out.display()))
        .args(["--set", "dataset.width=12", "--set", "dataset.height=12"])
        .args(["--set", "dataset.train.count=4"])
        .args(["--set", "dataset.interpolation.count=1", "--set", "dataset.extrapolation.count=2"]);
    cmd.output().unwrap()
}

#[test]
fn gen_scene_then_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = rayprior(dir.path(), &["gen-scene"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("dataset/transforms.json").exists());

    let out = rayprior(dir.path(), &["split", "--boundaries", "0.1,0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("frame,split,d_y"));
    assert_eq!(text.lines().count(), 1 + 4 + 1 + 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rayprior(dir.path(), &["gen-scene", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rayprior(dir.path(), &["train", "--stage", "2", "--variant", "baseline"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_3_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = rayprior(dir.path(), &["build-atlas"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("build-atlas"), "{err}");
}
