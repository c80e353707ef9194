use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_EXPERIMENT: &str = r#"{
  "k": 5,
  "grid": {"learning_rates": [0.001], "batch_sizes": [8], "hidden_dims": [null]},
  "train": {"max_steps": 40, "min_steps": 10, "warmup_steps": 10},
  "encoder": {"d": 8, "max_window": 16},
  "pretrain": {"max_steps": 10, "warmup_steps": 2, "effective_batch": 16, "micro_batch": 8,
               "eval_every": 5, "max_seq_len": 32},
  "preset": "Small"
}"#;

fn eyephen(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_eyephen"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = eyephen(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A temp dir holding a synthetic corpus under `s/`.
fn synth(patients: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--patients", patients, "--seed", "3", "--out", "s"]);
    dir
}

fn manifest(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn split_is_deterministic_and_patient_grouped() {
    let dir = synth("40");
    let d = dir.path();
    for out in ["a", "b"] {
        ok(
            d,
            &["split", "--corpus", "s/corpus.txt", "--annotations", "s/annotations.jsonl", "--k", "5", "--seed", "7", "--out", out],
        );
    }
    let a = fs::read_to_string(d.join("a/folds.tsv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b/folds.tsv")).unwrap());
    let patients: Vec<&str> = a.lines().skip(1).filter_map(|l| l.split('\t').next()).collect();
    let unique: std::collections::BTreeSet<&str> = patients.iter().copied().collect();
    assert_eq!(patients.len(), unique.len(), "a patient appears in two folds");
    assert_eq!(unique.len(), 40);

    // Same outputs, same digests; the derived seed is recorded.
    let (ma, mb) = (manifest(d.join("a/manifest.json")), manifest(d.join("b/manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["command"], "split");
    assert!(ma["derived_seeds"]["folds"].is_u64());
}

#[test]
fn synth_manifest_is_reproducible() {
    let (a, b) = (synth("20"), synth("20"));
    let (ma, mb) = (manifest(a.path().join("s/manifest.json")), manifest(b.path().join("s/manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["outputs"].as_object().unwrap().len(), 3);
}

#[test]
fn extract_stats_columns() {
    let dir = synth("30");
    let d = dir.path();
    let stdout = ok(d, &["extract", "--corpus", "s/corpus.txt", "--stats", "--out", "e"]);
    let header = stdout.lines().find(|l| l.starts_with("Clinical Concept")).expect("stats header");
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(&cols[cols.len() - 3..], ["ICD-10", "∩", "Text"]);
    assert!(stdout.contains("A2 - NPDR"));
    assert!(d.join("e/spans.jsonl").exists());

    ok(d, &["extract", "--corpus", "s/corpus.txt", "--stats", "--format", "csv", "--out", "c"]);
    let csv = fs::read_to_string(d.join("c/extraction_stats.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "Clinical Concept,ICD-10,∩,Text");
    assert_eq!(csv.lines().count(), 20);
}

#[test]
fn workbooks_round_trip_through_the_cli() {
    let dir = synth("10");
    let d = dir.path();
    ok(d, &["extract", "--corpus", "s/corpus.txt", "--out", "e"]);
    let stdout = ok(d, &["annotate-gen", "--corpus", "s/corpus.txt", "--spans", "e/spans.jsonl", "--limit", "5", "--out", "w"]);
    assert!(stdout.starts_with("5 workbooks"), "{stdout}");
    let books: Vec<_> = fs::read_dir(d.join("w/workbooks"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(books.len(), 5);
    ok(d, &["annotate-parse", "--corpus", "s/corpus.txt", "w/workbooks", "--out", "p"]);
    let spans = fs::read_to_string(d.join("p/annotations.jsonl")).unwrap();
    assert!(spans.lines().count() > 0);

    // A second, identical annotator: nothing to adjudicate.
    ok(d, &["annotate-parse", "--corpus", "s/corpus.txt", "w/workbooks", "--second", "w/workbooks", "--out", "m"]);
    let dis = fs::read_to_string(d.join("m/disagreements.csv")).unwrap();
    assert_eq!(dis.lines().count(), 1);
}

#[test]
fn experiment_report_has_table_shape() {
    // Large enough that every task's training folds hold a batch of 8.
    let dir = synth("150");
    let d = dir.path();
    fs::write(d.join("exp.json"), SMALL_EXPERIMENT).unwrap();
    let stdout = ok(
        d,
        &["--config", "exp.json", "experiment", "--corpus", "s/corpus.txt", "--annotations", "s/annotations.jsonl", "--out", "x"],
    );
    let lines: Vec<&str> = stdout.lines().collect();
    for col in [
        "Majority",
        "w/o Pretraining: Frozen",
        "w/o Pretraining: Unfrozen",
        "w/ Pretraining (Small): Frozen",
        "w/ Pretraining (Small): Unfrozen",
    ] {
        assert!(lines[0].contains(col), "missing column {col}");
    }
    let body: Vec<&str> = lines.iter().skip(2).copied().collect();
    assert_eq!(body.len(), 15);
    assert!(body[14].starts_with("Average (All Tasks)"));
    let cell = regex_lite(body[0]);
    assert_eq!(cell, 5, "{}", body[0]);

    // Fold scores feed `report`, which reproduces the table and a paired test.
    let report = ok(
        d,
        &["report", "--results", "x/results.csv", "--compare", "w/o Pretraining: Unfrozen", "Majority", "--out", "r"],
    );
    assert!(report.starts_with(&stdout), "report differs from experiment output");
    assert!(report.contains("t(69)"), "{report}");
    let comparisons = fs::read_to_string(d.join("x/comparisons.csv")).unwrap();
    assert_eq!(comparisons.lines().count(), 1 + 10);
}

/// Counts `.XX (.XX,.XX)` cells in a rendered row.
fn regex_lite(row: &str) -> usize {
    let s = |t: &str| t == "1.0" || (t.len() == 3 && t.starts_with('.') && t[1..].chars().all(|c| c.is_ascii_digit()));
    row.split("  ")
        .map(str::trim)
        .filter(|c| {
            let Some((m, rest)) = c.split_once(" (") else { return false };
            let Some(inner) = rest.strip_suffix(')') else { return false };
            let Some((lo, hi)) = inner.split_once(',') else { return false };
            s(m) && s(lo) && s(hi)
        })
        .count()
}

#[test]
fn pretrain_train_evaluate() {
    let dir = synth("40");
    let d = dir.path();
    fs::write(
        d.join("mlm.json"),
        r#"{"max_steps": 6, "warmup_steps": 2, "effective_batch": 8, "micro_batch": 4, "eval_every": 3, "max_seq_len": 32}"#,
    )
    .unwrap();
    ok(d, &["--config", "mlm.json", "pretrain", "--corpus", "s/corpus.txt", "--d", "8", "--out", "pt"]);
    assert!(d.join("pt/encoder.ckpt").exists());
    let history = fs::read_to_string(d.join("pt/pretrain_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    fs::write(d.join("exp.json"), SMALL_EXPERIMENT).unwrap();
    for (model, out) in [("majority", "tm"), ("neural-frozen", "tf")] {
        ok(
            d,
            &[
                "--config", "exp.json", "train", "--corpus", "s/corpus.txt", "--annotations", "s/annotations.jsonl",
                "--model", model, "--encoder", "pt/encoder.ckpt", "--task", "Laterality-All", "--fold", "1", "--out", out,
            ],
        );
        let preds = fs::read_to_string(d.join(out).join("predictions.jsonl")).unwrap();
        let first: Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
        assert_eq!(first["task"], "Laterality-All");
        assert_eq!(first["fold"], 1);
        ok(d, &["evaluate", "--predictions", &format!("{out}/predictions.jsonl"), "--out", &format!("{out}/eval")]);
        let metrics = fs::read_to_string(d.join(out).join("eval/metrics.csv")).unwrap();
        assert!(metrics.starts_with("task,column,fold,macro_f1\nLaterality-All,"));
    }
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = eyephen(dir.path(), &["extract", "--corpus", "missing.txt"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["command"], "extract");
    assert!(err["error"].as_str().unwrap().contains("missing.txt"));

    let out = eyephen(dir.path(), &["train", "--corpus", "x", "--annotations", "y", "--model", "svm"]);
    assert!(!out.status.success());
}
