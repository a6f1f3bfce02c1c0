use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn owdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owdf"))
        .args(args)
        .env_remove("OWDF_SEED")
        .output()
        .expect("spawn owdf")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn status(out: &Output) -> serde_json::Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().expect("status line");
    serde_json::from_str(last).expect("status line is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    for cmd in [&["--help"][..], &["train", "--help"], &["plot", "--help"]] {
        let out = owdf(cmd);
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(owdf(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(owdf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = owdf(&["prepare", "--trace", "/nonexistent.jsonl", "--history", "2", "--horizon", "2", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(status(&out)["status"], "error");
}

#[test]
fn plot_on_empty_report_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let fig = dir.path().join("fig.svg");
    for body in ["", "{}"] {
        std::fs::write(&report, body).unwrap();
        let out = owdf(&["plot", "--report", s(&report), "--kind", "calibration", "--out", s(&fig)]);
        assert_eq!(out.status.code(), Some(2), "body {body:?}");
    }
}

#[test]
fn simulate_matches_golden_first_record() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = owdf(&["simulate", "--config", s(&fixture("sim.json")), "--out", s(&trace)]);
    assert!(out.status.success());
    let st = status(&out);
    assert_eq!(st["records"], 400);
    assert_eq!(
        st["first_record_sha256"],
        "1c28683f88109532d03773aed83b2d5506177ce11784b0595cd4fbba71c7265a"
    );
}

#[test]
fn pipeline_produces_report_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trace = d.join("t.jsonl");
    assert!(owdf(&["simulate", "--config", s(&fixture("sim.json")), "--out", s(&trace)]).status.success());
    let ds = d.join("ds");
    let out = owdf(&["prepare", "--trace", s(&trace), "--history", "8", "--horizon", "4", "--out", s(&ds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = d.join("ckpt");
    let out = owdf(&[
        "train", "--dataset", s(&ds), "--model", "lstm", "--token-dim", "4", "--epochs", "2", "--out", s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("model.ckpt").exists() && ckpt.join("history.csv").exists());
    let report = d.join("report.json");
    let out = owdf(&["evaluate", "--ckpt", s(&ckpt), "--dataset", s(&ds), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(status(&out)["nll_mean"].as_f64().unwrap().is_finite());
    assert!(d.join("report.csv").exists());
    for kind in ["fanchart", "calibration"] {
        let fig = d.join(format!("{kind}.svg"));
        let out = owdf(&["plot", "--report", s(&report), "--kind", kind, "--out", s(&fig)]);
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(std::fs::read_to_string(&fig).unwrap().starts_with("<svg"));
        assert!(fig.with_extension("csv").exists());
    }

    let other = d.join("ds_other");
    assert!(owdf(&["prepare", "--trace", s(&trace), "--history", "8", "--horizon", "2", "--out", s(&other)])
        .status
        .success());
    let out = owdf(&["evaluate", "--ckpt", s(&ckpt), "--dataset", s(&other), "--out", s(&d.join("r2.json"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = owdf(&["plot", "--report", s(&report), "--kind", "nll-vs-horizon", "--out", s(&d.join("x.svg"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nll-vs-horizon needs sweep results"));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = std::fs::read_to_string(fixture("sim.json")).unwrap();
    let spec = format!(
        r#"{{
            "base": {{
                "seed": 3,
                "trace": {{"simulate": {sim}}},
                "window": {{"history_len": 6, "horizon_len": 2}},
                "model": {{"kind": "mlp", "token_dim": 4}},
                "train": {{"max_epochs": 1}}
            }},
            "grid": {{
                "models": [{{"kind": "mlp"}}, {{"kind": "transformer", "decode_mode": "autoregressive"}}],
                "windows": [[6, 2], [6, 4]]
            }}
        }}"#
    );
    let spec_path = d.join("sweep.json");
    std::fs::write(&spec_path, spec).unwrap();
    let results = d.join("results");
    let out = owdf(&["sweep", "--spec", s(&spec_path), "--out", s(&results)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(results.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    for kind in ["nll-vs-horizon", "train-time", "token-size", "nll-vs-datasize"] {
        let fig = d.join(format!("{kind}.svg"));
        let out = owdf(&["plot", "--report", s(&results.join("results.json")), "--kind", kind, "--out", s(&fig)]);
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = owdf(&["plot", "--report", s(&results.join("results.json")), "--kind", "fanchart", "--out", s(&d.join("f.svg"))]);
    assert_eq!(out.status.code(), Some(2));
}
