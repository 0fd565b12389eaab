use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hip-dreamer"));
    c.env("RUST_LOG", "warn");
    c
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn train_eval_export_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("smoke");
    let run_arg = run.to_str().unwrap();

    let out = stdout(&bin().args(["train", smoke().to_str().unwrap(), "--run-dir", run_arg, "--max-epochs", "2"]).output().unwrap());
    assert!(out.contains("paused after epoch 2"), "{out}");
    let out = stdout(&bin().args(["train", smoke().to_str().unwrap(), "--run-dir", run_arg]).output().unwrap());
    assert!(out.contains("final eval"), "{out}");
    for f in ["config.toml", "metrics.jsonl", "summary.json", "latents.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let out = stdout(&bin().args(["eval", run_arg, "--episodes", "2"]).output().unwrap());
    assert_eq!(out.lines().filter(|l| l.starts_with("episode ")).count(), 2);
    assert!(out.lines().last().unwrap().starts_with("mean "));

    std::fs::remove_file(run.join("latents.csv")).unwrap();
    let out = stdout(&bin().args(["export-latents", run_arg]).output().unwrap());
    assert!(Path::new(out.trim()).is_file());

    let out = stdout(&bin().args(["compare", run_arg]).output().unwrap());
    assert!(out.contains("taskinfer"), "{out}");
}

#[test]
fn bad_config_fails_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nhorizon = 5\nhorizn = 3\n").unwrap();
    let out = bin().args(["train", cfg.to_str().unwrap(), "--run-dir", tmp.path().join("r").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_run_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", tmp.path().join("nope").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
}
