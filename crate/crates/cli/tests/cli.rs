use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[data]
image_size = 32
[synth]
n = 12
size = 32
[classifier]
widths = [4, 4, 6, 6, 6]
convs_per_block = [1, 1, 1, 1, 1]
[classifier_train]
epochs = 2
batch_size = 4
[extractor]
widths = [2, 4, 4, 8, 8]
[extractor_train]
epochs = 1
lr0 = 1e-3
"#;

fn wsroi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsroi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the tiny config and a synthetic dataset; returns (config, data dir).
fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(wsroi(&["--config", p(&cfg), "--out", p(&data), "synth"]));
    (p(&cfg).to_string(), p(&data).to_string())
}

#[test]
fn zero_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsroi(&["--out", p(dir.path()), "synth", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let again = wsroi(&["--config", &cfg, "--out", &data, "synth"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(wsroi(&["--config", &cfg, "--out", &data, "synth", "--force"]));
}

#[test]
fn width_lists_are_comma_separated_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let base = ["--config", cfg.as_str(), "--data", data.as_str(), "--out", p(&run), "train-classifier"];
    let bad = wsroi(&[&base[..], &["--widths", "4,4,6"]].concat());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("exactly five"));
    ok(wsroi(&[&base[..], &["--widths", "2,4,4,6,6", "--epochs", "1"]].concat()));
    let snapshot = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(snapshot.contains("widths = [\n    2,\n    4,\n    4,\n    6,\n    6,\n]"), "{snapshot}");
}

#[test]
fn later_stage_names_the_missing_upstream_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let out = wsroi(&["--config", &cfg, "--data", &data, "--out", p(&run), "gen-pseudo"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-classifier"));
    let out = wsroi(&["--config", &cfg, "--data", &data, "--out", p(&run), "evaluate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-extractor"));
}

fn scalars(report: &str) -> serde_json::Map<String, serde_json::Value> {
    let v: serde_json::Value = serde_json::from_str(report).unwrap();
    v["metrics"].as_object().unwrap().clone()
}

#[test]
fn full_pipeline_and_no_contrast_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let base = ["--config", cfg.as_str(), "--data", data.as_str(), "--out", p(&run)];
    let stage = |extra: &[&str]| ok(wsroi(&[&base[..], extra].concat()));
    stage(&["train-classifier"]);
    stage(&["gen-pseudo"]);
    stage(&["train-extractor"]);
    let report = scalars(&stage(&["evaluate"]));
    assert_eq!(report.len(), 5);
    for key in ["ac", "auc", "precision", "recall", "f_measure"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(run.join("reports/metrics.json").is_file());
    assert!(run.join("resolved_config.toml").is_file());
    let plots = stage(&["plot"]);
    assert_eq!(plots.lines().count(), 2);

    // Later stages chain from the snapshot without repeating --config.
    let chained = ok(wsroi(&["--out", p(&run), "--data", &data, "train-extractor", "--ablate", "no-contrast"]));
    let summary: serde_json::Value = serde_json::from_str(&chained).unwrap();
    assert_eq!(summary["contrastive"], false);
    let fin = &summary["final"];
    assert_eq!(fin["total"], fin["ce"]);
    let log = fs::read_to_string(run.join("reports/extractor_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,ce,lq1,lq2,total"));
    let ablated = scalars(&ok(wsroi(&["--out", p(&run), "--data", &data, "evaluate"])));
    assert_ne!(ablated, report);
}
