use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde_json::Value;
use vox_cli::pipeline::{self, Run, STAGES};
use vox_cli::RunConfig;
use vox_core::volume::DatasetManifest;

fn vox() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vox"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny() -> RunConfig {
    let mut c = RunConfig::toy();
    c.name = "tiny".into();
    c.seed = 3;
    c.data.train_count = 12;
    c.data.test_count = 3;
    c.codec_epochs = 1;
    c.density_epochs = 1;
    c.seg.epochs = 1;
    c.seg.train_count = 4;
    c.seg.eval_count = 1;
    c.seg.ensemble_size = 2;
    c.seg.dropout_passes = 2;
    c.ablation.train_count = 6;
    c.ablation.codec_epochs = 1;
    c.ablation.density_epochs = 1;
    c.bootstrap_reps = 20;
    c
}

/// One complete tiny run shared by the tests below.
fn tiny_run() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tiny");
        let _ = std::fs::remove_dir_all(&dir);
        Run::open(&dir, tiny()).unwrap().full().unwrap();
        dir
    })
}

fn stderr_json(out: &std::process::Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or("{}");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = vox().args(["synth-data", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn missing_checkpoint_has_its_own_code() {
    let out = vox().args(["score", "--model", "/nonexistent/m.ckpt", "--volume", "/nonexistent/v.vol3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "missing_input");
}

#[test]
fn schema_violation_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"preset": "toy", "codec_epochs": "many"}"#).unwrap();
    let out = vox().args(["synth-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let out = vox().args(["synth-data", "--preset", "enormous", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = vox().env("VOX_THREADS", "0").args(["synth-data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_without_inputs_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    let out = vox().args(["encode", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synth_data_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"preset": "toy", "data": {"train_count": 5, "test_count": 2}, "seg": {"train_count": 2, "eval_count": 1}, "ablation": {"train_count": 2}}"#).unwrap();
    let out = vox().args(["synth-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = DatasetManifest::read(&dir.path().join(pipeline::DATA_MANIFEST)).unwrap();
    assert_eq!((m.split("train").count(), m.split("test").count()), (5, 2));
    for e in &m.entries {
        assert!(dir.path().join("data").join(&e.volume).exists());
    }
}

#[test]
fn score_prints_a_json_line() {
    let dir = tiny_run();
    let man = DatasetManifest::read(&dir.join(pipeline::DATA_MANIFEST)).unwrap();
    let vol = dir.join("data").join(&man.split("test").next().unwrap().volume);
    let out = vox().arg("score").arg("--model").arg(dir.join(pipeline::OOD_CKPT)).arg("--volume").arg(&vol).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let v: Value = serde_json::from_str(text.trim()).unwrap();
    assert!(v["total_loglik"].as_f64().unwrap() < 0.0);
    assert!(v["accept"].is_boolean());

    // the same volume scored inside the run gives the same likelihood
    let id = man.split("test").next().unwrap().id.clone();
    let runs = Run::open(dir, tiny()).unwrap().scores().unwrap();
    let rec = runs.iter().find(|r| r.volume_id == id).unwrap();
    assert!((rec.total_loglik - v["total_loglik"].as_f64().unwrap()).abs() < 1e-6 * rec.total_loglik.abs());

    let out = vox().arg("encode").arg("--model").arg(dir.join(pipeline::CODEC_CKPT)).arg("--volume").arg(&vol).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let dims: Vec<u64> = v["dims"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).collect();
    assert_eq!(v["tokens"].as_array().unwrap().len() as u64, dims.iter().product::<u64>());
}

#[test]
fn reports_are_well_formed() {
    let dir = tiny_run();
    let reports = dir.join(pipeline::REPORTS);
    let ood = std::fs::read_to_string(reports.join("ood_table.csv")).unwrap();
    assert_eq!(ood.lines().count(), 16);
    for e in std::fs::read_dir(&reports).unwrap() {
        let p = e.unwrap().path();
        let bytes = std::fs::read(&p).unwrap();
        match p.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                assert!(!bytes.contains(&b'\r'), "{}", p.display());
                assert!(bytes.ends_with(b"\n"));
            }
            Some("json") => {
                let v: Value = serde_json::from_slice(&bytes).unwrap();
                assert!(v.get("schema_version").is_some(), "{}", p.display());
            }
            _ => {}
        }
    }
}

#[test]
fn manifest_artifacts_exist_and_runs_resume() {
    let dir = tiny_run();
    let mut run = Run::open(dir, tiny()).unwrap();
    for s in STAGES {
        assert!(run.manifest.is_done(dir, s), "{s}");
        for p in run.manifest.artifact_paths(dir, s) {
            assert!(p.exists(), "{}", p.display());
        }
    }
    // nothing reruns on a complete directory
    for s in STAGES {
        assert!(!run.stage(s).unwrap(), "{s} reran");
    }
    // a damaged artifact makes only its stage stale
    let thr = dir.join("lesions/volumes.json");
    let keep = std::fs::read(&thr).unwrap();
    std::fs::write(&thr, b"{}").unwrap();
    assert!(!run.manifest.is_done(dir, "seg-uncertainty"));
    assert!(run.manifest.is_done(dir, "seg-train"));
    assert!(run.stage("seg-uncertainty").unwrap());
    assert_eq!(std::fs::read(&thr).unwrap(), keep);

    // a different config starts a fresh manifest
    let mut other = tiny();
    other.seed = 99;
    assert!(Run::open(dir, other).unwrap().manifest.stages.is_empty());
}
