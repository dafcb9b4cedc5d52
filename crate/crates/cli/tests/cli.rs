// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 11] = [
    "synth", "train", "eval", "evolve", "dims", "attr", "probe", "ngram", "rules", "annotate", "report",
];

fn featrace(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featrace"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = featrace(args, cwd);
    assert!(
        out.status.success(),
        "featrace {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = featrace(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for s in SUBCOMMANDS {
        assert!(text.contains(s), "usage lists {s}");
        assert_eq!(featrace(&[s, "--help"], dir.path()).status.code(), Some(0), "{s} --help");
    }
    assert_eq!(featrace(&["--version"], dir.path()).status.code(), Some(0));
}

#[test]
fn unknown_flag_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = featrace(&["train", "--bogus-flag", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
}

#[test]
fn unknown_subcommand_and_no_subcommand_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = featrace(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(featrace(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_input_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = featrace(&["evolve", "--checkpoint", "absent.xcck", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.xcck"));
    let out = featrace(&["report", "nowhere", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_variant_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = featrace(
        &[
            "attr", "--checkpoint", "c", "--manifest", "m", "--task", "t", "--head", "h", "--variant", "nope", "--out", "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

fn exists(dir: &Path, files: &[&str]) {
    for f in files {
        assert!(dir.join(f).is_file(), "missing output {f}");
    }
}

#[test]
fn pipeline_synth_train_evolve_attr_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("cfg.json"),
        r#"{"d_model":12,"n_true_features":12,"n_snapshots":3,"n_tokens":8000,"shard_tokens":4000,"vocab_size":100}"#,
    )
    .unwrap();
    fs::write(d.join("task.json"), r#"{"n_pairs":16,"n_causal":2}"#).unwrap();
    ok(&["synth", "--config", "cfg.json", "--task-config", "task.json", "--seed", "1", "--out", "data"], d);
    exists(d, &["data/manifest.json", "data/ground_truth.json", "data/vocab.json", "data/task/head.json", "data/metadata.json"]);

    let manifest_before = fs::read(d.join("data/manifest.json")).unwrap();
    ok(
        &[
            "train", "--manifest", "data/manifest.json", "--features", "32", "--lr", "2e-3", "--batch", "256", "--tokens",
            "20000", "--seed", "2", "--out", "run",
        ],
        d,
    );
    exists(d, &["run/checkpoint.xcck", "run/report.json", "run/training.csv", "run/metadata.json"]);
    assert_eq!(fs::read(d.join("data/manifest.json")).unwrap(), manifest_before);

    ok(&["evolve", "--checkpoint", "run/checkpoint.xcck", "--out", "evo"], d);
    exists(
        d,
        &[
            "evo/features.csv",
            "evo/trajectories.csv",
            "evo/projection.csv",
            "evo/dimensionality.csv",
            "evo/charts/decoder_norms.svg",
            "evo/charts/dimensionality.svg",
        ],
    );
    let features = fs::read_to_string(d.join("evo/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 33);
    assert!(features.starts_with("feature,norm_1,"));

    ok(
        &[
            "attr", "--checkpoint", "run/checkpoint.xcck", "--manifest", "data/task/manifest.json", "--task",
            "data/task/task.jsonl", "--head", "data/task/head.json", "--variant", "ig-patching", "--n-steps", "10",
            "--topk-grid", "1,2,5", "--out", "attr",
        ],
        d,
    );
    exists(d, &["attr/attribution.csv", "attr/ablation.csv", "attr/charts/ablation.svg", "attr/metadata.json"]);
    assert_eq!(fs::read_to_string(d.join("attr/ablation.csv")).unwrap().lines().count(), 7);

    ok(&["report", "run", "evo", "attr", "--out", "rep"], d);
    exists(
        d,
        &[
            "rep/tables/training.csv",
            "rep/tables/trajectories.csv",
            "rep/tables/ablation.csv",
            "rep/charts/training_loss.svg",
            "rep/metadata.json",
        ],
    );
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("attr/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "attr");
    let inputs = meta["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"].as_str().unwrap().ends_with("head.json")));
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
}
