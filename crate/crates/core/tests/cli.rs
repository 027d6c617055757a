use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use snlab::conv::explicit_conv_matrix;
use snlab::linalg::exact_sigma_matrix;
use snlab::Tensor;

fn snlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn verify_variance_suite_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(
        &["verify", "--suite", "thm3", "--m", "64", "--n", "64", "--trials", "10000", "--seed", "1", "--out", "r/"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = json(&dir.path().join("r/thm3.json"));
    assert_eq!(r["pass"], true);
    assert!(dir.path().join("r/thm3.csv").exists());
}

#[test]
fn verify_rescaling_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(&["verify", "--suite", "prop2", "--layers", "4", "--seed", "0"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("prop2.json"))["pass"], true);
}

#[test]
fn every_suite_passes_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["prop1", "thm2", "hessian", "internal", "setd"] {
        let out = snlab(&["verify", "--suite", suite, "--out", "r"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{suite}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = snlab(&["verify", "--suite", "thm4", "--kernel", "8,4,3,3", "--trials", "2000", "--workers", "2", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_suite_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(snlab(&["verify", "--suite", "nosuch"], dir.path()).status.code(), Some(2));
    assert_eq!(snlab(&["verify"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_reads_config_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"suite": "thm3", "m": 3, "n": 5, "trials": 1000, "out": "cfg"}"#).unwrap();
    let out = snlab(&["verify", "--config", "c.json", "--n", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = json(&dir.path().join("cfg/thm3.json"));
    assert_eq!(r["rows"], 3);
    assert_eq!(r["cols"], 7);
}

#[test]
fn specnorm_scalar_kernel() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("k.json"), r#"{"shape":[1,1,1,1],"data":[2.0]}"#).unwrap();
    let out = snlab(&["specnorm", "k.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for f in ["sigma_w1", "sigma_w2", "sigma_bsn"] {
        assert_eq!(r[f], 2.0);
    }
}

#[test]
fn specnorm_conv_matches_explicit_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = snlab::Rng::new(3);
    let k = Tensor::from_fn(&[3, 2, 3, 3], || rng.gaussian());
    fs::write(dir.path().join("k.json"), serde_json::to_string(&k).unwrap()).unwrap();
    let out = snlab(&["specnorm", "k.json", "--conv", "--input", "8x8", "--pad", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = exact_sigma_matrix(&explicit_conv_matrix(&k, [2, 8, 8], 1, 1).unwrap()).unwrap();
    assert!((r["sigma_conv"].as_f64().unwrap() - want).abs() < 1e-6);
}

#[test]
fn specnorm_bad_input_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(snlab(&["specnorm", "missing.json"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    assert_eq!(snlab(&["specnorm", "bad.json"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("short.json"), r#"{"shape":[2,2],"data":[1.0]}"#).unwrap();
    assert_eq!(snlab(&["specnorm", "short.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_zero_iters_writes_config_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(&["train", "--dataset", "ring8", "--norm", "bsn", "--iters", "0", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let run = dir.path().join("run");
    assert_eq!(json(&run.join("config.json"))["norm"], "bsn");
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    assert!(run.join("ckpt_0.json").exists());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.trim(), "iter,layer,grad_fro,sigma_w1,sigma_w2,sigma_bsn,param_var,loss_d,loss_g,mode_coverage");
}

#[test]
fn train_rejects_nonpositive_scale() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(&["train", "--norm", "none", "--scale", "0", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_short_run_populates_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(
        &["train", "--dataset", "ring8", "--norm", "sn_w", "--iters", "200", "--seed", "1", "--log-every", "100", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("run/metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 3);
    for r in &rows {
        for field in r.iter() {
            assert!(!field.is_empty() && field.parse::<f64>().unwrap().is_finite());
        }
    }
    assert!(dir.path().join("run/samples.csv").exists());
    assert!(dir.path().join("run/ckpt_200.json").exists());

    let out = snlab(&["verify", "--suite", "setd", "--checkpoints", "run", "--out", "scan"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn divergence_guard_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = snlab(
        &["train", "--norm", "none", "--scale", "1000", "--alpha-d", "0.5", "--iters", "50", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/metrics.csv").exists());
}
