//! Runs the `bci` binary end to end on small synthetic recordings.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bci(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bci"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bci(dir, args);
    assert!(
        out.status.success(),
        "bci {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed JSON error line.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = bci(dir, args);
    assert!(!out.status.success(), "bci {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error line in {stderr}"));
    (out.status.code().unwrap(), serde_json::from_str(line).unwrap())
}

fn recorded(dir: &Path, name: &str, seed: &str, secs: &str) {
    ok(dir, &["--seed", seed, "record", "--duration", secs, "--out", name]);
}

#[test]
fn replay_reproduces_every_label() {
    let dir = tempfile::tempdir().unwrap();
    recorded(dir.path(), "a.bcis", "1", "30");
    let out = ok(dir.path(), &["replay", "--session", "a.bcis"]);
    assert!(out.contains("labels: 100% reproduced"), "{out}");
}

#[test]
fn sweep_grid_runs_four_cells_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    recorded(dir.path(), "a.bcis", "2", "40");
    let args = [
        "--seed", "3", "sweep", "--sessions", "*.bcis", "--fractions", "1.0", "--grid", "n=1..2,l=100,200",
        "--epochs", "1", "--out", "sweep",
    ];
    let out = ok(dir.path(), &args);
    assert!(out.contains("cells: 4 computed, 0 already done, 0 pending"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{csv}");
    for cell in ["f1,1,100,", "f1,1,200,", "f1,2,100,", "f1,2,200,"] {
        assert!(rows.iter().any(|r| r.starts_with(cell)), "missing {cell} in {csv}");
    }
    let summary = std::fs::read_to_string(dir.path().join("sweep/summary.csv")).unwrap();
    assert!(summary.starts_with("dataset,cells,best_n,best_l,best_test_acc,mean_test_acc\nf1,4,"), "{summary}");

    let again = ok(dir.path(), &args);
    assert!(again.contains("cells: 0 computed, 4 already done, 0 pending"), "{again}");
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    recorded(dir.path(), "a.bcis", "4", "40");
    let run = |out: &str| {
        let args = [
            "--seed", "7", "train", "--sessions", "a.bcis", "--model-kind", "cnn", "--n-convs", "1", "--dense-len",
            "100", "--epochs", "2", "--learning-rate", "0.01", "--out", out,
        ];
        let text = ok(dir.path(), &args);
        text.lines().filter(|l| !l.starts_with("wrote")).map(String::from).collect::<Vec<_>>()
    };
    let a = run("a.bcim");
    let b = run("b.bcim");
    assert_eq!(a, b);
    assert!(a.iter().any(|l| l.starts_with("test_accuracy: ")), "{a:?}");

    // The stored model scores identically on replay.
    let score = |m: &str| {
        let out = ok(dir.path(), &["replay", "--session", "a.bcis", "--model", m]);
        out.lines().find(|l| l.contains("accuracy")).unwrap().to_string()
    };
    assert_eq!(score("a.bcim"), score("b.bcim"));
}

#[test]
fn omitted_seed_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    let out = bci(dir.path(), &["simulate", "--duration", "1", "--out", "r.bcir"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let seed: u64 = stderr
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .expect("seed line")
        .parse()
        .unwrap();
    let config = stderr.lines().find_map(|l| l.strip_prefix("config: ")).expect("config line");
    let config: Value = serde_json::from_str(config).unwrap();
    assert_eq!(config["seed"], seed);
}

#[test]
fn recorded_raw_file_replays_as_a_source() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "5", "simulate", "--duration", "12", "--out", "raw.bcir"]);
    let out = ok(
        dir.path(),
        &["--seed", "5", "record", "--source", "file:raw.bcir", "--duration", "10", "--out", "r.bcis"],
    );
    assert!(out.contains("wrote r.bcis"), "{out}");
    // Shorter than requested: the source runs dry.
    let (code, err) = fails(
        dir.path(),
        &["record", "--source", "file:raw.bcir", "--duration", "30", "--out", "long.bcis"],
    );
    assert_eq!((code, err["error"].as_str()), (4, Some("source")), "{err}");
}

#[test]
fn validation_appends_rows() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["validate", "--record-s", "12", "--control-s", "5", "--out", "v"];
    let mut rated = vec!["--seed", "6"];
    rated.extend(common);
    rated.extend(["--model-kind", "knn", "--rating", "4", "--session-id", "one"]);
    ok(dir.path(), &rated);
    let mut unrated = vec!["--seed", "6"];
    unrated.extend(common);
    unrated.extend(["--model-kind", "baseline", "--session-id", "two"]);
    let out = ok(dir.path(), &unrated);
    assert!(out.contains("row marked incomplete"), "{out}");

    let mut rows = csv::Reader::from_path(dir.path().join("v/validation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "one");
    assert_eq!(&rows[0][2], "knn");
    assert_eq!(&rows[0][7], "4");
    assert_eq!(&rows[0][8], "true");
    assert_eq!(&rows[1][2], "baseline-none");
    assert_eq!(&rows[1][7], "");
    assert_eq!(&rows[1][8], "false");
    assert!(dir.path().join("v/one.bcis").exists() && dir.path().join("v/two.bcis").exists());

    let report = ok(dir.path(), &["report", "--sessions", "v/*.bcis"]);
    assert_eq!(report.lines().count(), 3, "{report}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (code, err) = fails(d, &["train", "--sessions", "missing*.bcis", "--out", "m.bcim"]);
    assert_eq!((code, err["error"].as_str(), err["exit_code"].as_i64()), (3, Some("data"), Some(3)));

    std::fs::write(d.join("junk.bcis"), b"BCIS not really").unwrap();
    assert_eq!(fails(d, &["replay", "--session", "junk.bcis"]).0, 3);

    std::fs::write(d.join("bad.toml"), "[plan]\ntraining_s = \"long\"\n").unwrap();
    let (code, err) = fails(d, &["--config", "bad.toml", "simulate", "--out", "x.bcir"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));

    assert_eq!(fails(d, &["simulate", "--duration=-1", "--out", "x.bcir"]).0, 2);
    assert_eq!(fails(d, &["simulate", "--out", "x.bcir", "--mu-depth", "2"]).0, 2);

    recorded(d, "a.bcis", "8", "20");
    let (code, err) = fails(
        d,
        &["train", "--sessions", "a.bcis", "--model-kind", "cnn", "--momentum", "1.5", "--out", "m.bcim"],
    );
    assert_eq!(code, 2, "{err}");

    // Nothing listens on port 9 of localhost.
    let (code, err) = fails(d, &["record", "--source", "tcp:127.0.0.1:9", "--duration", "1", "--out", "t.bcis"]);
    assert_eq!((code, err["error"].as_str()), (4, Some("source")), "{err}");

    // Argument errors are usage errors too.
    let (code, err) = fails(d, &["train", "--no-such-flag"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));
    assert_eq!(fails(d, &["validate", "--rating", "9", "--out", "v"]).0, 2);
    assert!(bci(d, &["--help"]).status.success());
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 12\n[plan]\ntraining_s = 6.0\n").unwrap();
    ok(dir.path(), &["--config", "c.toml", "record", "--out", "a.bcis"]);
    ok(dir.path(), &["--seed", "12", "record", "--duration", "6", "--out", "b.bcis"]);
    let a = std::fs::read(dir.path().join("a.bcis")).unwrap();
    let b = std::fs::read(dir.path().join("b.bcis")).unwrap();
    assert_eq!(a.len(), b.len());
    let out = ok(dir.path(), &["report", "--sessions", "a.bcis", "b.bcis"]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().skip(1).collect()).collect();
    assert_eq!(rows[0], rows[1], "same seed and duration give the same session");
}
