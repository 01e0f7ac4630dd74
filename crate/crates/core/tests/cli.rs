use std::path::Path;
use std::process::{Command, Output};

fn bittol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bittol"))
        .args(args)
        .env("BITTOL_THREADS", "2")
        .output()
        .expect("run bittol")
}

fn ok(args: &[&str]) -> Output {
    let out = bittol(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_quick(dir: &Path, ber: &str) -> std::path::PathBuf {
    let out = dir.join(format!("train-{ber}"));
    ok(&[
        "train", "--arch", "In-FC16-FC16-10", "--data", "blobs", "--epochs", "3", "--lr", "0.01",
        "--batch-size", "64", "--ber-train", ber, "--seed", "4", "--quiet", "--out", s(&out),
    ]);
    out
}

#[test]
fn train_writes_model_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_quick(dir.path(), "0.05");
    for f in ["model.bnn", "train_log.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["arch"], "In-FC16-FC16-10");
    assert_eq!(manifest["flags"]["ber_train"], 0.05);
}

#[test]
fn invalid_arch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bittol(&["train", "--arch", "In-FQ8-10", "--data", "blobs", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bittol(&[
        "train", "--arch", "In-FC8-10", "--data", "fashion", "--data-dir", s(&dir.path().join("nothing")),
        "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = bittol(&["sweep-ber", "--model", s(&dir.path().join("none.bnn")), "--data", "blobs", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rows_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_quick(dir.path(), "0").join("model.bnn");
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["sweep-ber", "--model", s(&model), "--data", "blobs", "--bers", "0,0.01,0.05,0.1,0.2", "--trials", "10", "--seed", "9", "--out", s(&out)]);
        std::fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let rows: Vec<Vec<&str>> = a.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // ten trial rows plus a mean row per rate
    assert_eq!(rows.len(), 55);
    assert_eq!(rows.iter().filter(|r| r[1] == "mean").count(), 5);

    let eval = ok(&["eval", "--model", s(&model), "--data", "blobs"]);
    let clean: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let clean = clean["clean_accuracy"].as_f64().unwrap();
    for r in rows.iter().filter(|r| r[0] == "0") {
        assert_eq!(r[2].parse::<f64>().unwrap(), clean);
    }
}

#[test]
fn metrics_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_quick(dir.path(), "0").join("model.bnn");
    let m = dir.path().join("m");
    ok(&["metrics", "--model", s(&model), "--data", "blobs", "--label", "base", "--out", s(&m)]);
    let tol = std::fs::read_to_string(m.join("tolerance.csv")).unwrap();
    let header: Vec<&str> = tol.lines().next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|h| h.starts_with("T^")).count(), 6);
    let imp = std::fs::read_to_string(m.join("importance.csv")).unwrap();
    assert_eq!(imp.lines().count() - 1, 32);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(m.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(doc["importance"]["values"].as_array().unwrap().len(), 32);

    let t = dir.path().join("t");
    ok(&["metrics", "--model", s(&model), "--data", "blobs", "--skip-importance", "--grid", "1,2", "--out", s(&t)]);
    assert!(!t.join("importance.csv").exists());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.join("metrics.json")).unwrap()).unwrap();
    assert!(doc["importance"].is_null());
    assert_eq!(doc["tolerance"]["tuple"].as_array().unwrap().len(), 2);

    let csv = dir.path().join("summary.csv");
    let out = ok(&["report", s(&m), s(&t.join("metrics.json")), "--out", s(&csv)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(std::fs::read_to_string(&csv).unwrap().contains("\nbase,1,"));
}

#[test]
fn importance_position_units() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_quick(dir.path(), "0").join("model.bnn");
    let out = dir.path().join("i");
    ok(&["importance", "--model", s(&model), "--data", "blobs", "--limit", "100", "--unit", "position", "--out", s(&out)]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("importance.json")).unwrap()).unwrap();
    assert_eq!(doc["values"].as_array().unwrap().len(), 32);
}

#[test]
fn verify_theorem_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["verify-theorem", "--neurons", "20", "--out", s(dir.path())]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("PASS"));
    assert!(dir.path().join("verify.json").exists());
    ok(&["verify-theorem", "--neurons", "5", "--first-layer", "--z", "3", "--fan-in", "4"]);
    ok(&["verify-theorem", "--neurons", "20", "--flip-inputs"]);
    let big = bittol(&["verify-theorem", "--fan-in", "40"]);
    assert_eq!(big.status.code(), Some(1));
}
