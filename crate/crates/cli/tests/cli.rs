use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sla_core::mask::build_pair_mask;
use sla_core::{
    all_pairs_distance, build_alignment, neighbor_min_distance, parse_conllu, AdditiveMask, AlignOptions,
    MaskSidecar, Vocabulary,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn sla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sla")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = sla(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn help_exits_0() {
    assert_eq!(sla(&["--help"]).status.code(), Some(0));
    assert_eq!(sla(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sla(&["mask", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn chain_with_wide_threshold_allows_everything() {
    let dir = tempfile::tempdir().unwrap();
    let out = sla(&["mask", "--conllu", s(&fixture("chain.conllu")), "--mode", "sla", "--m", "3", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("mask.csv")).unwrap();
    assert_eq!(csv, "1,1,1,1,1\n".repeat(5));
    let sidecar: MaskSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mask.json")).unwrap()).unwrap();
    assert_eq!(sidecar.len, 5);
    assert_eq!(sidecar.m, Some(3));
    assert_eq!(sidecar.sentence_id, "chain");
}

#[test]
fn zero_threshold_closes_distant_words() {
    let dir = tempfile::tempdir().unwrap();
    let out = sla(&["mask", "--conllu", s(&fixture("pair.conllu")), "--m", "0", "--out", s(dir.path())]);
    assert!(out.status.success());
    let mask = AdditiveMask::from_allow_csv(&std::fs::read_to_string(dir.path().join("mask.csv")).unwrap()).unwrap();
    // "she" (pos 1) neighbours only "saw"; "today" (pos 6) is two edges from both.
    assert!(mask.is_allowed(1, 2));
    assert!(!mask.is_allowed(1, 6));
}

#[test]
fn exported_pair_mask_round_trips_to_the_library_mask() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture("pair.conllu");
    let out = sla(&["mask", "--conllu", s(&path), "--mode", "pair", "--m", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed = AdditiveMask::from_allow_csv(&std::fs::read_to_string(dir.path().join("mask.csv")).unwrap()).unwrap();

    let sentences = parse_conllu(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let vocab = Vocabulary::whole_words(&sentences, false);
    let refs: Vec<_> = sentences.iter().collect();
    let a = build_alignment(&refs, &vocab, AlignOptions { max_len: 64, lowercase: false }).unwrap();
    let d: Vec<_> = sentences.iter().map(|s| neighbor_min_distance(&all_pairs_distance(s))).collect();
    let expected = build_pair_mask(&d[0], &d[1], 1, &a).unwrap();
    assert_eq!(parsed, expected);
    let sidecar: MaskSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mask.json")).unwrap()).unwrap();
    assert_eq!(sidecar.sentence_id, "s1+s2");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"m": 0}"#).unwrap();
    let chain = fixture("chain.conllu");
    let from_file = dir.path().join("file");
    let from_flag = dir.path().join("flag");
    assert!(sla(&["mask", "--conllu", s(&chain), "--config", s(&cfg), "--out", s(&from_file)]).status.success());
    assert!(sla(&["mask", "--conllu", s(&chain), "--config", s(&cfg), "--m", "3", "--out", s(&from_flag)])
        .status
        .success());
    let read = |d: &Path| std::fs::read_to_string(d.join("mask.csv")).unwrap();
    assert!(read(&from_file).contains('0'));
    assert!(!read(&from_flag).contains('0'));
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conllu");
    std::fs::write(&bad, "1\tword\t_\t_\t_\t_\tnot-a-head\t_\t_\t_\n\n").unwrap();
    let out = sla(&["mask", "--conllu", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    let out = sla(&["mask", "--conllu", s(&dir.path().join("missing.conllu")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_default_config_passes() {
    let out = sla(&["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    let value: f64 = text
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output {text:?}"));
    assert!(value < 1e-4);
}

#[test]
fn gradcheck_above_tolerance_is_a_numeric_failure() {
    let out = sla(&["gradcheck", "--seed", "7", "--samples", "2", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn checkpoint_settings_cannot_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let out = sla(&[
        "forward",
        "--conllu",
        s(&fixture("chain.conllu")),
        "--checkpoint",
        s(dir.path()),
        "--seed",
        "3",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn artifacts_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = sla(&["synth", "--seed", "4", "--train", "12", "--dev", "4", "--out", s(&out_dir.join("data"))]);
        assert!(out.status.success());
        let out = sla(&["forward", "--conllu", s(&fixture("pair.conllu")), "--seed", "4", "--out", s(&out_dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
        ["data/train.jsonl", "data/dev.jsonl", "data/vocab.txt", "forward.jsonl"]
            .map(|f| std::fs::read(out_dir.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sla(&["synth", "--seed", "2", "--train", "32", "--dev", "8", "--out", s(&d.join("data"))])
        .status
        .success());
    let out = sla(&[
        "train",
        "--train",
        s(&d.join("data/train.jsonl")),
        "--dev",
        s(&d.join("data/dev.jsonl")),
        "--epochs",
        "1",
        "--out",
        s(&d.join("run")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,dev_metric\n"));
    let out = sla(&[
        "eval",
        "--checkpoint",
        s(&d.join("run/checkpoint")),
        "--data",
        s(&d.join("data/dev.jsonl")),
        "--out",
        s(&d.join("eval")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "f1");
    assert_eq!(report["examples"], 8);
}
