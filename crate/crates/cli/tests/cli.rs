use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn dualmark(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmark"))
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(root)
        .args(args)
        .env_remove("DUALMARK_ARTIFACTS")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = dualmark(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn verdict(root: &Path, extra: &[&str]) -> bool {
    let mut args = vec!["--format", "machine", "verify"];
    args.extend_from_slice(extra);
    let v: serde_json::Value = serde_json::from_str(&ok(root, &args)).unwrap();
    v["triggers"]["verdict"].as_bool().unwrap()
}

#[test]
fn gen_triggers_without_an_encoder_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-corpus"]);
    let out = dualmark(dir.path(), &["gen-triggers"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("encoders/toy-s7.json"), "{err}");
}

#[test]
fn schema_violation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config()).unwrap().replace("trials = 16", "trails = 16");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dualmark"))
        .args(["--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "gen-corpus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trails"), "{err}");
}

#[test]
fn seed_override_may_not_reuse_a_foreign_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualmark(dir.path(), &["--seed", "8", "gen-corpus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds.foreign"));
}

#[test]
fn missing_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dualmark"))
        .args(["--config", "/nonexistent/dualmark.toml", "report"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/dualmark.toml"));
}

#[test]
fn owner_triple_verifies_and_a_foreign_module_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for cmd in ["gen-corpus", "train-encoder", "gen-triggers", "train-transform"] {
        ok(root, &[cmd]);
    }
    assert!(verdict(root, &[]));

    let foreign_module = root.join("transforms/toy-s8/transform-s11.json");
    assert!(!verdict(root, &["--module", foreign_module.to_str().unwrap()]));

    let foreign_model = root.join("encoders/toy-s9.json");
    assert!(!verdict(root, &["--model", foreign_model.to_str().unwrap()]));

    let foreign_triggers = root.join("triggers/toy-s8");
    assert!(!verdict(root, &["--triggers", foreign_triggers.to_str().unwrap()]));

    let table = ok(root, &["report"]);
    assert!(table.contains("toy-s7/transform-s11"), "{table}");
}
