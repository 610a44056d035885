use std::path::Path;
use std::process::{Command, Output};

fn boxtag(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_boxtag"));
    cmd.args(args).env_remove("BOXTAG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn echoed_seed(dir: &Path) -> u64 {
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("config.json")).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(boxtag(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(boxtag(&["--version"], &[]).status.code(), Some(0));
    assert_eq!(boxtag(&[], &[]).status.code(), Some(1));
    assert_eq!(boxtag(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(boxtag(&["synth", "--n"], &[]).status.code(), Some(1));
}

#[test]
fn missing_corpus_is_a_data_error_naming_the_path() {
    let o = boxtag(&["validate", "/nonexistent/receipts"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/nonexistent/receipts"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn empty_corpus_and_bad_checkpoint_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        boxtag(&["validate", s(dir.path())], &[]).status.code(),
        Some(2)
    );
    let bogus = dir.path().join("model.bin");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let fx = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/sroie");
    let out = dir.path().join("p");
    let o = boxtag(
        &[
            "predict",
            "--model",
            s(&bogus),
            "--corpus",
            fx,
            "--out",
            s(&out),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let fx = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/sroie");
    let out = dir.path().join("m");
    let o = boxtag(
        &[
            "train",
            "--corpus",
            fx,
            "--out",
            s(&out),
            "--method",
            "rule",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = boxtag(
        &[
            "train",
            "--corpus",
            fx,
            "--out",
            s(&out),
            "--set",
            "hiden=3",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hiden"));
    let o = boxtag(
        &[
            "train",
            "--corpus",
            fx,
            "--out",
            s(&out),
            "--set",
            "hidden=0",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = boxtag(
        &[
            "eval",
            "--corpus",
            fx,
            "--out",
            s(&out),
            "--method",
            "boxtagger",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = boxtag(&["synth", "--out", s(&out)], &[("BOXTAG_SEED", "many")]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"learning_rate": 1}"#).unwrap();
    let o = boxtag(&["synth", "--out", s(&out), "--config", s(&cfg)], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "synth_n": 2, "synth_render": false}"#).unwrap();
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join(name);
        let mut args = vec!["synth", "--out", s(&out), "--config", s(&cfg)];
        args.extend_from_slice(extra);
        assert_eq!(boxtag(&args, env).status.code(), Some(0));
        echoed_seed(&out)
    };
    assert_eq!(run("file", &[], &[]), 3);
    assert_eq!(run("env", &[], &[("BOXTAG_SEED", "5")]), 5);
    assert_eq!(run("flag", &["--seed", "9"], &[("BOXTAG_SEED", "5")]), 9);
}

#[test]
fn synth_validate_features_and_rule_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let o = boxtag(
        &[
            "synth",
            "--n",
            "4",
            "--seed",
            "7",
            "--out",
            s(&corpus),
            "--no-images",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(!corpus.join("synth00000.png").exists());

    let o = boxtag(&["validate", s(&corpus)], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("4 receipts"), "{}", stdout(&o));

    let csv_path = dir.path().join("f/features.csv");
    let o = boxtag(
        &["features", "--corpus", s(&corpus), "--out", s(&csv_path)],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let boxes: usize = (0..4)
        .map(|i| {
            std::fs::read_to_string(corpus.join(format!("synth{i:05}.txt")))
                .unwrap()
                .lines()
                .count()
        })
        .sum();
    assert_eq!(csv.lines().count(), boxes + 1);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 102);

    let out = dir.path().join("e");
    let o = boxtag(
        &[
            "eval",
            "--method",
            "rule",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--format",
            "table",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("box macro-F1"));
    assert!(out.join("report.txt").is_file());
    assert!(out.join("config.json").is_file());
}

#[test]
fn oracle_and_gradcheck_commands() {
    let o = boxtag(
        &["oracle-test", "--instances", "30", "--grad-seeds", "1"],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max logZ error"));
    let o = boxtag(&["gradcheck", "--seeds", "1"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("max rel error"));
}
