use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) {
    std::fs::write(dir.join(name), json).unwrap();
}

const TINY: &str = r#"{"epochs": 1, "batch_size": 4, "data": {"n_train": 8, "n_val": 2, "n_test": 3}}"#;

#[test]
fn prompt_template_substitutes_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["prompt-template", "--target", "breast lesion"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Segment and identify breast lesion within ultrasound images."));
    assert_eq!(text.matches("breast lesion").count(), 3);
    assert!(!text.contains("[target]"));
}

#[test]
fn gen_data_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--n", "10", "--seed", "3", "--out", "d"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path().join("d");
    let manifest = fusionseg::synth::Manifest::read(&d.join("manifest.json")).unwrap();
    assert_eq!(manifest.samples.len(), 10);
    assert_eq!(manifest.split.train.len(), 7);
    assert_eq!(manifest.split.val.len(), 1);
    assert_eq!(manifest.split.test.len(), 2);
    assert_eq!(manifest.load_samples(&d).unwrap().len(), 10);
}

#[test]
fn train_then_eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.json", TINY);
    let out = run(&["train", "--config", "tiny.json", "--out", "m.ckpt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(
        &["eval", "--ckpt", "m.ckpt", "--split", "test", "--report", "r.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,dice_pct,hd_px,hd_missing");
    assert_eq!(lines.len(), 5);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.json", r#"{"epochz": 3}"#);
    write_config(dir.path(), "zero.json", r#"{"epochs": 0}"#);
    for args in [
        &["train", "--config", "bad.json", "--out", "x"][..],
        &["train", "--config", "zero.json", "--out", "x"],
        &["train", "--config", "missing.json", "--out", "x"],
        &["eval", "--ckpt", "x", "--split", "sideways", "--report", "r"],
    ] {
        let out = run(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), b"CCSM\x01\x00").unwrap();
    let out = run(&["eval", "--ckpt", "junk.ckpt", "--report", "r.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["eval", "--ckpt", "absent.ckpt", "--report", "r.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "hot.json",
        r#"{"lr0": 1e300, "epochs": 4, "batch_size": 2, "data": {"n_train": 4, "n_val": 1, "n_test": 1}}"#,
    );
    let out = run(&["train", "--config", "hot.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
