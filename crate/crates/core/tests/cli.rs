use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cost::evaluator::EvalReport;

fn cost(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cost")).args(args).env("COST_LOG", "warn").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Default synthetic catalog with small models so the whole pipeline runs in seconds.
const SMALL: &str = r#"{
  "synthetic": {"kind": "clusters"},
  "tokenizer": {"encoder_hidden": [64], "latent_dim": 16, "codebook_size": 16, "epochs": 2, "lr": 0.001},
  "generator": {"encoder_layers": 1, "decoder_layers": 1, "model_dim": 32, "heads": 4, "ff_dim": 64,
                "max_input_items": 3, "epochs": 1, "batch_size": 256, "beam_width": 20},
  "eval_ks": [1, 5, 10]
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn run_pipeline(config: &Path, out: &Path) {
    for stage in ["synth", "train-tokenizer", "assign", "train-generator", "evaluate"] {
        let (code, err) = cost(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{} failed: {}", stage, err);
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn evaluate_before_training_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (code, err) = cost(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("missing artifact"), "{}", err);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cost(&["evaluate"]).0, 1);
    assert_eq!(cost(&["frobnicate"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(cost(&["synth", "--config", cfg.to_str().unwrap(), "--loss-mode", "xx"]).0, 1);
    let bad = write_config(dir.path(), r#"{"generator": {"model_dim": 30, "heads": 4}}"#);
    assert_eq!(cost(&["synth", "--config", bad.to_str().unwrap()]).0, 1);
}

#[test]
fn malformed_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{ not json");
    assert_eq!(cost(&["synth", "--config", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn diverging_training_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"synthetic": {"n_items": 200, "n_clusters": 4, "n_users": 50},
            "tokenizer": {"encoder_hidden": [16], "latent_dim": 4, "codebook_size": 4, "epochs": 50, "lr": 1e100,
                          "loss_mode": "re"}}"#,
    );
    let c = cfg.to_str().unwrap();
    assert_eq!(cost(&["synth", "--config", c]).0, 0);
    let (code, err) = cost(&["train-tokenizer", "--config", c]);
    assert_eq!(code, 3, "{}", err);
    assert!(err.contains("numeric"), "{}", err);
}

#[test]
fn full_pipeline_writes_report_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&cfg, &a);
    let report = EvalReport::load(&a.join("eval").join("report.json")).unwrap();
    assert_eq!(report.users, 1000);
    assert_eq!(report.ks, vec![1, 5, 10]);
    assert!(report.recall.windows(2).all(|w| w[0] <= w[1]));
    run_pipeline(&cfg, &b);
    for out in [&a, &b] {
        assert_eq!(cost(&["report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 0);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (path, bytes) in &sa {
        assert!(bytes == &sb[path], "{} differs between reruns", path.display());
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(cost(&["synth", "--config", c, "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(cost(&["synth", "--config", c, "--out", b.to_str().unwrap(), "--seed", "5"]).0, 0);
    assert_ne!(fs::read(a.join("data/items.cste")).unwrap(), fs::read(b.join("data/items.cste")).unwrap());
}

#[test]
fn sweep_writes_one_report_per_cell_and_a_merged_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replacen('{', r#"{"sweep": {"codebook_size": [16, 64]},"#, 1);
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let (code, err) = cost(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{}", err);
    let reports: Vec<_> = snapshot(&out.join("sweep")).into_keys().filter(|p| p.ends_with("report.json")).collect();
    assert_eq!(reports.len(), 2);
    let merged = fs::read_to_string(out.join("sweep").join("merged.csv")).unwrap();
    let lines: Vec<&str> = merged.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok") && !l.contains("NA")));
    let csvs = snapshot(&out).into_keys().filter(|p| p.extension().is_some_and(|e| e == "csv") && p.starts_with("sweep") && p.components().count() == 2).count();
    assert_eq!(csvs, 1);
}

#[test]
fn sweep_marks_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    // tau = 0 is rejected by the tokenizer, so that cell fails while the other runs.
    let text = SMALL.replacen('{', r#"{"sweep": {"tau": [0.1, 0.0]},"#, 1);
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    assert_eq!(cost(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 0);
    let merged = fs::read_to_string(out.join("sweep").join("merged.csv")).unwrap();
    let lines: Vec<&str> = merged.lines().collect();
    assert!(lines[1].ends_with(",ok"));
    assert!(lines[2].contains(",NA,") && lines[2].contains("FAILED"));
}

#[test]
fn sweep_without_axes_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(cost(&["sweep", "--config", cfg.to_str().unwrap()]).0, 1);
}
