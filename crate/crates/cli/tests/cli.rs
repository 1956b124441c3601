use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 5
[dataset]
kind = "synthetic"
n_examples = 400
shape = { channels = 1, height = 4, width = 4 }
[split]
n_train = 100
n_eval = 60
n_shadow = 12
[model]
kind = "mlp"
hidden = [16]
activation = "tanh"
[train]
epochs = 3
batch_size = 32
[audit]
kinds = ["loss", "lira"]
population = 50
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, format!("{TINY}\n{extra}")).unwrap();
    (dir, cfg)
}

fn memfab(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memfab"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn target_checksum(out: &Path) -> String {
    let dir = out.join("models/target");
    let side = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .unwrap();
    let v: Value = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
    v["checksum"].as_str().unwrap().to_string()
}

fn header(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().next().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn rerun_hits_cache_and_seed_changes_checksum() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["train"]));
    let first = target_checksum(&out);
    assert_eq!(manifest(&out)["stages"]["train"]["cache_hit"], false);
    let o = ok(memfab(&cfg, &out, &["train"]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train: cached"));
    assert_eq!(manifest(&out)["stages"]["train"]["cache_hit"], true);
    assert_eq!(target_checksum(&out), first);

    let other = dir.path().join("other");
    ok(memfab(&cfg, &other, &["train", "--seed", "6"]));
    assert_ne!(target_checksum(&other), first);
}

#[test]
fn missing_prerequisite_fails_with_stage_diagnostic() {
    let (dir, cfg) = setup("");
    let out = dir.path().join("run");
    let o = memfab(&cfg, &out, &["fabricate"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage fabricate") && err.contains("missing prerequisite artifact"), "{err}");
}

#[test]
fn zero_budget_is_reported_as_identity() {
    let (dir, cfg) = setup("[fabrication]\nepsilon = 0.0\nalpha0 = 0.0\n");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["train"]));
    ok(memfab(&cfg, &out, &["fabricate"]));
    assert_eq!(manifest(&out)["notes"]["identity_perturbation"]["mfa-eps0"], true);
}

#[test]
fn fd_backend_writes_fd_column_only() {
    let (dir, cfg) = setup("[robust]\nlambda_grid = [5.0]\nkinds = [\"loss\"]\n");
    let out = dir.path().join("run");
    for stage in ["train", "fabricate", "detect"] {
        ok(memfab(&cfg, &out, &[stage, "--backend", "fd"]));
    }
    let h = header(&out.join("outcomes/mfd/mfa-eps4.csv"));
    assert!(h.iter().any(|c| c == "grad_norm_fd"));
    assert!(!h.iter().any(|c| c == "grad_norm"));
    assert!(h.iter().any(|c| c == "mahalanobis") && h.iter().any(|c| c == "lid"));
}

#[test]
fn robust_sweeps_default_grid_and_calibrates() {
    let (dir, cfg) = setup("[robust]\nkinds = [\"loss\"]\n");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["run"]));
    let n = std::fs::read_dir(out.join("outcomes/armia"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("loss-lambda"))
        .count();
    assert_eq!(n, 2 * 7);
    let chosen = manifest(&out)["notes"]["calibrated_lambda"]["loss"].as_f64().unwrap();
    assert!((1..=7).any(|k| 5.0 * k as f64 == chosen));
    let rows = std::fs::read_to_string(out.join("report/robust.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 1 + 7);
}

#[test]
fn empty_grid_reports_baseline_only() {
    let (dir, cfg) = setup("[robust]\nlambda_grid = []\nkinds = [\"loss\"]\n");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["run"]));
    let rows = std::fs::read_to_string(out.join("report/robust.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("loss,baseline,"));
}

#[test]
fn identical_runs_write_identical_files() {
    let (dir, cfg) = setup("[robust]\nlambda_grid = [5.0, 10.0]\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(memfab(&cfg, &a, &["run"]));
    ok(memfab(&cfg, &b, &["run"]));
    let mut files = Vec::new();
    for sub in ["outcomes/mi", "outcomes/mfa", "outcomes/mfd", "outcomes/armia", "fabricated", "report"] {
        for e in std::fs::read_dir(a.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                files.push(p.strip_prefix(&a).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() > 20);
    for f in files {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn deleting_an_artifact_reruns_only_its_stage() {
    let (dir, cfg) = setup("[robust]\nlambda_grid = [5.0]\n");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["run"]));
    let before = std::fs::read(out.join("outcomes/mi/loss.csv")).unwrap();
    std::fs::remove_file(out.join("outcomes/mi/loss.csv")).unwrap();
    ok(memfab(&cfg, &out, &["run"]));
    let m = manifest(&out);
    for stage in ["train", "fabricate", "detect", "robust", "report"] {
        assert_eq!(m["stages"][stage]["cache_hit"], true, "{stage}");
    }
    assert_eq!(m["stages"]["audit"]["cache_hit"], false);
    assert_eq!(std::fs::read(out.join("outcomes/mi/loss.csv")).unwrap(), before);
}

#[test]
fn malformed_records_name_the_row() {
    let (dir, cfg) = setup("[robust]\nlambda_grid = [5.0]\n");
    let out = dir.path().join("run");
    ok(memfab(&cfg, &out, &["run"]));
    let path = out.join("outcomes/mi/loss.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[3] = lines[3].rsplit_once(',').map(|(a, _)| format!("{a},oops")).unwrap();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    std::fs::remove_file(out.join("report/summary.md")).unwrap();
    let o = memfab(&cfg, &out, &["report"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage report") && err.contains("row 3"), "{err}");
}
