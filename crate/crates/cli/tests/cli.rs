//! Exit codes and error lines of the command-line interface.

use std::process::Command;

fn unveil(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_unveil"))
        .args(args)
        .output()
        .expect("spawn unveil");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn help_succeeds() {
    assert_eq!(unveil(&["--help"]).0, 0);
    assert_eq!(unveil(&["train", "--help"]).0, 0);
}

#[test]
fn usage_errors_are_config_errors() {
    let (code, err) = unveil(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(unveil(&[]).0, 2);
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, err) = unveil(&["train", "--data", d, "--eta", "-1"]);
    assert_eq!(code, 2, "{err}");
    assert_eq!(err.lines().count(), 1, "{err}");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let runs = dir.path().join("runs");
    let (code, err) = unveil(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.starts_with("error[data]: "), "{err}");
}

#[test]
fn eval_with_unmatched_files_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let img = unveil_core::data::Image::filled(4, 4, 0.5);
    unveil_core::data::write_image(&a.join("x.png"), &img).unwrap();
    unveil_core::data::write_image(&b.join("y.png"), &img).unwrap();
    let (code, err) = unveil(&[
        "eval",
        "--renders",
        a.to_str().unwrap(),
        "--gt",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
}
