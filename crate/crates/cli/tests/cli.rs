use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn hptq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hptq")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quantize(out: &Path, report: &Path, extra: &[&str]) -> Output {
    let f = fixtures();
    let (model, data) = (f.join("cnn"), f.join("calib"));
    let mut args = vec!["quantize", "--model", s(&model), "--data", s(&data), "--out", s(out), "--report", s(report)];
    args.extend_from_slice(extra);
    hptq(&args)
}

fn stage<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["stages"].as_array().unwrap().iter().find(|s| s["stage"] == name).unwrap()
}

#[test]
fn quantize_with_defaults_writes_model_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = (dir.path().join("q"), dir.path().join("report.json"));
    let o = quantize(&out, &report, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.json").exists());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["config"]["measure"], "mse");
    assert_eq!(stage(&r, "snc")["skipped"], false);
    let q = hptq::ir::load_model(&out).unwrap();
    q.check_quantized().unwrap();
}

#[test]
fn disable_snc_skips_only_that_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = (dir.path().join("q"), dir.path().join("report.json"));
    assert!(quantize(&out, &report, &["--disable", "snc"]).status.success());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(stage(&r, "snc")["skipped"], true);
    assert_eq!(stage(&r, "equalization")["skipped"], false);
    assert_eq!(r["config"]["toggles"]["snc"], false);
}

#[test]
fn nc_column_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = (dir.path().join("q"), dir.path().join("report.json"));
    let o = quantize(
        &out,
        &report,
        &["--error", "nc", "--disable", "equalization,bias_correction,outlier_removal"],
    );
    assert!(o.status.success());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let t = &r["config"]["toggles"];
    assert_eq!((t["equalization"].clone(), t["bias_correction"].clone()), (Value::Bool(false), Value::Bool(false)));
    for e in stage(&r, "activation_thresholds")["entries"].as_array().unwrap() {
        assert_eq!(e["params"]["exponent"], e["params"]["nc_exponent"]);
    }
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [
        vec!["quantize", "--model", "m", "--data", "d", "--out", "o", "--disable", "bogus"],
        vec!["quantize", "--model", "m", "--data", "d", "--out", "o", "--error", "l3"],
        vec!["quantize", "--model", "m", "--data", "d", "--out", "o", "--frobnicate"],
        vec!["transmogrify"],
    ] {
        assert_eq!(hptq(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = hptq(&["quantize", "--model", s(&missing), "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loading model"));
    let f = fixtures();
    let o = hptq(&[
        "quantize",
        "--model",
        s(&f.join("cnn")),
        "--data",
        s(&f.join("calib")),
        "--out",
        s(&dir.path().join("o")),
        "--bits",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_and_labels_file() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = (dir.path().join("q"), dir.path().join("report.json"));
    assert!(quantize(&out, &report, &[]).status.success());
    let f = fixtures();
    let json = dir.path().join("eval.json");
    let o = hptq(&["eval", "--float", s(&f.join("cnn")), "--quant", s(&out), "--data", s(&f.join("test")), "--json", s(&json)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("top1_accuracy"));
    let e: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(e["samples"], 2000);

    // labels from a separate file override the stored ones
    let labels = hptq::ir::load_dataset(&f.join("test")).unwrap().labels.unwrap();
    let text: Vec<String> = labels.iter().map(|l| ((l + 1) % 10).to_string()).collect();
    let lf = dir.path().join("labels.txt");
    std::fs::write(&lf, text.join("\n")).unwrap();
    let o = hptq(&["eval", "--float", s(&f.join("cnn")), "--quant", s(&out), "--data", s(&f.join("test")), "--labels", s(&lf), "--json", s(&json)]);
    assert!(o.status.success());
    let e2: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(e2["float_score"].as_f64().unwrap() < 5.0);

    // a float model is not accepted as the quantized side
    let o = hptq(&["eval", "--float", s(&f.join("cnn")), "--quant", s(&f.join("cnn")), "--data", s(&f.join("test"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stats_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let csv = dir.path().join("stats.csv");
    let o = hptq(&["stats", "--model", s(&f.join("cnn")), "--data", s(&f.join("calib")), "--out", s(&csv)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tensor,channel,min,max,mean"));
    assert!(text.lines().any(|l| l.starts_with("relu2,15,")));
    assert!(text.lines().any(|l| l.starts_with("input,2,")));
}

#[test]
fn ablate_prints_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let json = dir.path().join("ablation.json");
    let o = hptq(&[
        "ablate",
        "--model",
        s(&f.join("cnn")),
        "--data",
        s(&f.join("calib")),
        "--eval",
        s(&f.join("test")),
        "--json",
        s(&json),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    for suite in ["measures", "activations", "weights", "joint"] {
        assert!(out.contains(suite), "{suite}");
    }
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 18);
}
