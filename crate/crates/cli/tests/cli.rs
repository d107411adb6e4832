use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_handtraj"));
    c.env_remove("HANDTRAJ_MODEL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

/// A short scene and a prior fitted to the shipped sample data.
fn scene(dir: &Path, frames: usize) -> (PathBuf, PathBuf) {
    let seq = dir.join("seq");
    ok(&["synth", "--out", s(&seq), "--set", &format!("frames={frames}"), "--set", "seed=5"]);
    let prior = dir.join("prior.htarray");
    let mut args = vec!["prior", "fit", "--window", "16", "--stride", "8", "--out", s(&prior)];
    let samples: Vec<PathBuf> = (1..=4).map(|i| data(&format!("prior_sample/seq{i}.jsonl"))).collect();
    args.extend(samples.iter().map(|p| s(p)));
    ok(&args);
    (seq, prior)
}

#[test]
fn synth_optimize_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, prior) = scene(dir.path(), 24);
    let run_dir = dir.path().join("run");
    ok(&[
        "optimize",
        "--tracks",
        s(&seq.join("tracks.jsonl")),
        "--camera",
        s(&seq.join("camera.json")),
        "--prior",
        s(&prior),
        "--out",
        s(&run_dir),
        "--set",
        "chunk_size=16",
    ]);
    let manifest = read_json(&run_dir.join("manifest.json"));
    assert_eq!(manifest["stages"], 3);
    assert_eq!(manifest["frames"], 24);
    let chunks = manifest["chunks"].as_array().unwrap();
    assert_eq!(chunks.len(), 2);
    assert_eq!(chunks[0]["omega"], chunks[1]["omega"]);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for key in ["world", "stage2", "camera", "config", "diagnostics"] {
        assert!(Path::new(manifest["outputs"][key].as_str().unwrap()).exists(), "{key}");
    }
    let diag = std::fs::read_to_string(run_dir.join("diagnostics.jsonl")).unwrap();
    assert!(diag.lines().count() > 0);
    assert!(diag.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    ok(&[
        "evaluate",
        "--pred",
        s(&run_dir.join("world.jsonl")),
        "--gt",
        s(&seq.join("gt.jsonl")),
        "--out",
        s(&report),
        "--csv",
        s(&csv),
    ]);
    let r = read_json(&report);
    let mpjpe = r["mean"]["mpjpe"].as_f64().unwrap();
    assert!(mpjpe.is_finite() && mpjpe < 20.0, "mpjpe {mpjpe} mm");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn missing_camera_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth", "--out", s(&seq), "--set", "frames=8"]);
    let missing = dir.path().join("no_such_camera.json");
    let out = run(&[
        "optimize",
        "--tracks",
        s(&seq.join("tracks.jsonl")),
        "--camera",
        s(&missing),
        "--out",
        s(&dir.path().join("run")),
        "--skip-stage3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "not_found");
    assert_eq!(e["error"]["path"], s(&missing));
    assert!(!dir.path().join("run").exists(), "nothing written before inputs load");
}

#[test]
fn skipping_the_prior_stage_records_two_stages() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth", "--out", s(&seq), "--set", "frames=12", "--set", "seed=2"]);
    let run_dir = dir.path().join("run");
    ok(&[
        "optimize",
        "--tracks",
        s(&seq.join("tracks.jsonl")),
        "--camera",
        s(&seq.join("camera.json")),
        "--out",
        s(&run_dir),
        "--skip-stage3",
    ]);
    let m = read_json(&run_dir.join("manifest.json"));
    assert_eq!(m["stages"], 2);
    assert!(m["timings"]["stage3_seconds"].as_f64().unwrap() < 0.01);
    assert_eq!(read_json(&run_dir.join("config.json"))["skip_stage3"], true);
}

#[test]
fn prior_stage_without_a_prior_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth", "--out", s(&seq), "--set", "frames=8"]);
    let out = run(&[
        "optimize",
        "--tracks",
        s(&seq.join("tracks.jsonl")),
        "--camera",
        s(&seq.join("camera.json")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", s(dir.path()), "--set", "frams=8"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("frams"));
}

#[test]
fn ground_truth_scores_zero_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&["synth", "--out", s(&seq), "--set", "frames=20"]);
    let gt = seq.join("gt.jsonl");
    let out = ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt)]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["mpjpe", "pa_mpjpe", "g_mpjpe", "ga_mpjpe", "acc_err_raw", "acc_err_div", "rte", "pen_volume"] {
        assert!(r["mean"][key].as_f64().unwrap() < 1e-6, "{key}: {}", r["mean"][key]);
    }
}

#[test]
fn evaluate_pairs_directories_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for seed in 1..=3 {
        let seq = dir.path().join(format!("s{seed}"));
        ok(&["synth", "--out", s(&seq), "--set", "frames=10", "--set", &format!("seed={seed}")]);
        for d in [&pred, &gt] {
            std::fs::copy(seq.join("gt.jsonl"), d.join(format!("seq{seed}.jsonl"))).unwrap();
        }
    }
    let csv = dir.path().join("all.csv");
    let out = ok(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--jobs", "2", "--csv", s(&csv)]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&String> = r["sequences"].as_object().unwrap().keys().collect();
    assert_eq!(names, ["seq1", "seq2", "seq3"]);
    let rows: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 5, "header, three sequences, mean");
    assert!(rows[4].starts_with("mean,"));

    std::fs::remove_file(gt.join("seq2.jsonl")).unwrap();
    let out = run(&["evaluate", "--pred", s(&pred), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["path"].as_str().unwrap().ends_with("seq2.jsonl"));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let scenario = data("scenarios/default.toml");
    for d in [&a, &b] {
        ok(&["synth", "--config", s(&scenario), "--set", "frames=16", "--out", s(d)]);
    }
    for f in ["tracks.jsonl", "camera.json", "gt.jsonl", "gt_camera.json", "scenario.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fitted_prior_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (_, prior) = scene(dir.path(), 8);
    let out = ok(&["prior", "inspect", s(&prior)]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["window"], 16);
    assert!(summary["rank"].as_u64().unwrap() > 0);

    let out = run(&["prior", "fit", "--window", "16", "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2), "no training data");
}

#[test]
fn exported_model_loads_by_flag_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let left = dir.path().join("left.htarray");
    ok(&["model", "export", "--mirror", "--out", s(&left)]);
    let by_flag: Value = serde_json::from_slice(&ok(&["model", "validate", "--model", s(&left)]).stdout).unwrap();
    assert_eq!(by_flag["vertices"], 778);
    assert_eq!(by_flag["closed_mesh"], true);

    let out = bin().args(["model", "validate"]).env("HANDTRAJ_MODEL", &left).output().unwrap();
    assert!(out.status.success());
    let by_env: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(by_env["model"], s(&left));
    assert_eq!(by_env["bone_child"], by_flag["bone_child"]);

    let missing = dir.path().join("none.htarray");
    let out = run(&["model", "validate", "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_bounds_match_the_builtin_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bounds.json");
    ok(&["model", "bounds", "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data("bounds/builtin.json")).unwrap());
}
