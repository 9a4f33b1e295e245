//! Drives the `spnet` binary: exit codes, output files and the JSON lines it prints.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spnet::data::cache_read;

fn spnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spnet")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<Value> {
    let out = spnet(dir, args);
    assert!(out.status.success(), "spnet {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON ({e}): {l}")))
        .collect()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    spnet(dir, args).status.code().unwrap()
}

fn kinds<'a>(lines: &'a [Value], kind: &str) -> Vec<&'a Value> {
    lines.iter().filter(|l| l["kind"] == kind).map(|l| &l["data"]).collect()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/modelnet_mini").canonicalize().unwrap()
}

/// A tiny synthetic dataset in `dir/data`.
fn tiny_data(dir: &Path) {
    ok(dir, &["synth", "--per-class", "6", "--test-per-class", "3", "--points", "32", "--seed", "1", "--out", "data"]);
}

const SMALL: [&str; 8] = ["--point-widths", "8,16", "--head-widths", "8", "--batch-size", "8", "--seed", "2"];

#[test]
fn help_and_version_succeed_while_bad_usage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["--help"]), 0);
    assert_eq!(code(dir.path(), &["--version"]), 0);
    assert_eq!(code(dir.path(), &["train", "--help"]), 0);
    assert_eq!(code(dir.path(), &[]), 1);
    assert_eq!(code(dir.path(), &["fly"]), 1);
    assert_eq!(code(dir.path(), &["eval", "--cache", "x"]), 1);
    assert_eq!(code(dir.path(), &["train", "--mode", "quantum"]), 1);
}

#[test]
fn synth_defaults_match_the_desk_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let lines = ok(dir.path(), &["synth", "--out", "shapes"]);
    assert_eq!(lines[0]["kind"], "config");
    let counts = kinds(&lines, "class_counts");
    assert_eq!(counts.len(), 2);
    assert_eq!(counts[0]["counts"]["torus"], 250);
    assert_eq!(counts[1]["counts"]["cube"], 50);
    let train = cache_read(&dir.path().join("shapes/train.cache")).unwrap();
    let test = cache_read(&dir.path().join("shapes/test.cache")).unwrap();
    assert_eq!((train.len(), test.len()), (1000, 200));
    assert_eq!(train.manifest.points_per_cloud, 256);
    assert_eq!(train.manifest.class_names, ["cube", "pyramid", "sphere", "torus"]);
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("shapes/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"]["test"]["sample_count"], 200);
}

#[test]
fn synth_rejects_bad_counts_and_classes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["synth", "--per-class", "0", "--out", "a"]), 1);
    assert_eq!(code(dir.path(), &["synth", "--classes", "sphere,blob", "--out", "a"]), 1);
    assert!(!dir.path().join("a").exists());
    let lines = ok(dir.path(), &["synth", "--classes", "torus,cube", "--per-class", "2", "--test-per-class", "1", "--points", "8", "--out", "a"]);
    assert_eq!(kinds(&lines, "class_counts")[0]["counts"], serde_json::json!({ "cube": 2, "torus": 2 }));
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let again = ["synth", "--per-class", "6", "--test-per-class", "3", "--points", "32", "--seed", "1", "--out", "data"];
    let out = spnet(dir.path(), &again);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(dir.path(), &[&again[..], &["--force"]].concat());
}

#[test]
fn prepare_reads_the_mesh_tree() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixtures();
    let lines = ok(dir.path(), &["prepare", "--data-root", root.to_str().unwrap(), "--out", "mesh", "--points", "128", "--strict"]);
    let counts = kinds(&lines, "class_counts");
    assert_eq!(counts[0]["counts"], serde_json::json!({ "bed": 2, "chair": 2 }));
    assert_eq!(counts[1]["counts"], serde_json::json!({ "bed": 1, "chair": 1 }));
    let train = cache_read(&dir.path().join("mesh/train.cache")).unwrap();
    assert_eq!(train.manifest.source_checksums.len(), 4);
    assert_eq!(train.clouds[0].points.shape(), [128, 3]);

    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(dir.path(), &["prepare", "--data-root", "empty", "--out", "x"]), 2);
    assert_eq!(code(dir.path(), &["prepare", "--data-root", "missing", "--out", "x"]), 2);
}

#[test]
fn train_eval_profile_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let train = [&["train", "--train-cache", "data/train.cache", "--test-cache", "data/test.cache", "--out", "run", "--epochs", "3", "--t-eval", "3"][..], &SMALL].concat();
    let lines = ok(d, &train);
    assert_eq!(lines[0]["kind"], "config");
    assert_eq!(lines[0]["data"]["model"]["num_classes"], 4);
    assert_eq!(kinds(&lines, "epoch").len(), 3);
    let summary = kinds(&lines, "summary")[0];
    assert_eq!(summary["eval_set"], "test");
    assert_eq!(summary["eval"]["ensemble_accuracy"].as_array().unwrap().len(), 3);
    for file in ["config.json", "summary.json", "checkpoint.spn"] {
        assert!(d.join("run").join(file).is_file(), "{file}");
    }
    assert_eq!(fs::read_to_string(d.join("run/log.jsonl")).unwrap().lines().count(), 3);

    let report = ok(d, &["eval", "--checkpoint", "run/checkpoint.spn", "--cache", "data/test.cache", "--t-eval", "3"]);
    let report = kinds(&report, "report")[0];
    assert_eq!(report["samples"], 12);
    assert_eq!(&report["ensemble_accuracy"], &summary["eval"]["ensemble_accuracy"]);

    let profile = ok(d, &["profile", "--checkpoint", "run/checkpoint.spn", "--cache", "data/test.cache", "--t-eval", "2", "--out", "p.json"]);
    let p = kinds(&profile, "report")[0];
    assert_eq!(p["mode"], "snn");
    // First layer 3 -> 8 over 32 points and two steps, for every sample.
    assert_eq!(p["multiplications"], 12 * 2 * 32 * 3 * 8);
    let rate = p["firing_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert!(p["energy_ratio_vs_ann"].as_f64().unwrap() > 0.0);
    assert!(d.join("p.json").is_file());
    assert_eq!(code(d, &["profile", "--checkpoint", "run/checkpoint.spn", "--cache", "data/test.cache", "--out", "p.json"]), 1);

    let unfolded = ok(d, &["profile", "--checkpoint", "run/checkpoint.spn", "--cache", "data/test.cache", "--t-eval", "2", "--unfolded-norm"]);
    let u = kinds(&unfolded, "report")[0];
    assert!(u["multiplications"].as_u64().unwrap() > p["multiplications"].as_u64().unwrap());
}

#[test]
fn dense_profile_has_no_firing_rate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    ok(d, &[&["train", "--train-cache", "data/train.cache", "--out", "ann", "--epochs", "1", "--mode", "ann"][..], &SMALL].concat());
    let lines = ok(d, &["profile", "--checkpoint", "ann/checkpoint.spn", "--cache", "data/test.cache"]);
    let p = kinds(&lines, "report")[0];
    assert_eq!(p["mode"], "ann");
    assert!(p["firing_rate"].is_null());
    // Dense per-cloud count: 32·(3·8 + 8·16) + 16·8 + 8·4.
    assert_eq!(p["multiplications"], 32 * (3 * 8 + 8 * 16) + 16 * 8 + 8 * 4);
}

#[test]
fn gradhist_writes_one_file_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let args = [&["gradhist", "--train-cache", "data/train.cache", "--out", "h", "--k", "0.5,5,20", "--t", "1,4", "--samples", "8"][..], &SMALL].concat();
    let lines = ok(d, &args);
    let cells = kinds(&lines, "histogram");
    assert_eq!(cells.len(), 6);
    for cell in cells {
        assert_eq!(cell["total"], 3 * 8);
        let file: Value = serde_json::from_slice(&fs::read(d.join(cell["file"].as_str().unwrap())).unwrap()).unwrap();
        let binned: u64 = file["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(binned + file["zero_count"].as_u64().unwrap(), 24);
        assert_eq!(file["edges"].as_array().unwrap().len(), file["counts"].as_array().unwrap().len() + 1);
    }
    assert!(d.join("h/hist_k0.5_t4.json").is_file());
    assert_eq!(code(d, &[&["gradhist", "--train-cache", "data/train.cache", "--out", "h2", "--mode", "ann"][..], &SMALL].concat()), 1);
}

#[test]
fn compare_reports_every_regime() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let args = [
        &["compare", "--train-cache", "data/train.cache", "--test-cache", "data/test.cache", "--out", "cmp", "--epochs", "1", "--seeds", "2", "--multi-steps", "2", "--max-eval-steps", "3"][..],
        &SMALL,
    ]
    .concat();
    let lines = ok(d, &args);
    assert_eq!(kinds(&lines, "row").len(), 6);
    let median = kinds(&lines, "median");
    assert_eq!(median.len(), 3);
    assert_eq!(median[0]["accuracy"].as_array().unwrap().len(), 3);
    let saved: Value = serde_json::from_slice(&fs::read(d.join("cmp/comparison.json")).unwrap()).unwrap();
    assert_eq!(saved["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn config_files_are_strict_and_flags_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    fs::write(d.join("bad.json"), r#"{"train": {"epochs": 1, "epochz": 2}}"#).unwrap();
    assert_eq!(code(d, &["train", "--config", "bad.json", "--train-cache", "data/train.cache", "--out", "r"]), 1);
    fs::write(
        d.join("good.json"),
        r#"{"model": {"point_mlp_widths": [4], "head_widths": []}, "train": {"epochs": 5, "batch_size": 8}, "data": {"train_cache": "data/train.cache", "test_cache": null}}"#,
    )
    .unwrap();
    let lines = ok(d, &["train", "--config", "good.json", "--epochs", "1", "--out", "r"]);
    assert_eq!(lines[0]["data"]["train"]["epochs"], 1);
    assert_eq!(lines[0]["data"]["model"]["point_mlp_widths"], serde_json::json!([4]));
    assert_eq!(kinds(&lines, "summary")[0]["eval_set"], "train");
    // A class count that disagrees with the cache is rejected.
    fs::write(d.join("classes.json"), r#"{"model": {"num_classes": 7}, "data": {"train_cache": "data/train.cache"}}"#).unwrap();
    assert_ne!(code(d, &["train", "--config", "classes.json", "--epochs", "1", "--out", "r2"]), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    fs::write(d.join("junk.cache"), b"not a cache").unwrap();
    assert_eq!(code(d, &["eval", "--checkpoint", "nowhere.spn", "--cache", "data/test.cache"]), 2);
    assert_eq!(code(d, &[&["train", "--train-cache", "junk.cache", "--out", "r", "--epochs", "1"][..], &SMALL].concat()), 2);
    fs::write(d.join("junk.spn"), b"SPNCKPT\0garbage").unwrap();
    assert_eq!(code(d, &["profile", "--checkpoint", "junk.spn", "--cache", "data/test.cache"]), 2);
}
