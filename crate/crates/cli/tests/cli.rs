use std::path::Path;
use std::process::{Command, Output};

use efe_core::data::Dataset;
use efe_core::network::NetworkParams;

fn efe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efe")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(path: &Path, samples: &str, seed: &str) {
    let out = efe(&[
        "--no-timestamp", "generate", "--classes", "3", "--samples", samples, "--frequencies", "0.7,0.2,0.1",
        "--seed", seed, "--out", s(path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_prints_realized_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let out = efe(&[
        "--no-timestamp", "generate", "--classes", "3", "--frequencies", "0.9,0.09,0.01", "--samples", "1000",
        "--out", s(&path),
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "900,90,10");
    assert_eq!(Dataset::load(&path).unwrap().num_samples(), 1000);
}

#[test]
fn timestamp_header_is_a_single_optional_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let out = efe(&["generate", "--classes", "2", "--frequencies", "0.5,0.5", "--samples", "10", "--out", s(&path)]);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("# efe "));
    assert_eq!(lines[1], "5,5");
}

#[test]
fn generate_usage_errors_exit_2() {
    let out = efe(&["generate", "--classes", "3", "--frequencies", "0.9,0.09,0.01", "--samples", "1000"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    for freq in ["0.5,0.6,0.1", "0.5,0.5"] {
        let out = efe(&["generate", "--classes", "3", "--frequencies", freq, "--samples", "10", "--out", s(&path)]);
        assert_eq!(out.status.code(), Some(2), "{freq}");
    }
}

#[test]
fn generate_io_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("d.csv");
    let out = efe(&["generate", "--classes", "2", "--frequencies", "0.5,0.5", "--samples", "10", "--out", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn label_flip_changes_exact_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let out = efe(&[
        "generate", "--classes", "3", "--frequencies", "0.5,0.3,0.2", "--samples", "100", "--label-flip", "0.2",
        "--seed", "4", "--out", s(&path),
    ]);
    assert!(out.status.success());
    let d = Dataset::load(&path).unwrap();
    let flipped = d.reference_labels.iter().zip(&d.true_labels).filter(|(a, b)| a != b).count();
    assert_eq!(flipped, 20);
}

#[test]
fn train_writes_three_parseable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = (dir.path().join("train.csv"), dir.path().join("val.csv"));
    generate(&tr, "200", "1");
    generate(&va, "80", "2");
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"max_iterations": 40, "hidden_widths": [6]}"#).unwrap();
    let out_dir = dir.path().join("run");
    let out = efe(&[
        "--no-timestamp", "train", "--loss", "efe", "--mode", "grpr", "--train", s(&tr), "--val", s(&va),
        "--config", s(&config), "--out-dir", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("iterations="));

    let model = NetworkParams::load(out_dir.join("model.json")).unwrap();
    assert_eq!((model.input_width(), model.num_classes()), (2, 3));
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(history.as_bytes());
    assert_eq!(rows.headers().unwrap().len(), 6);
    let n = rows.records().map(|r| r.unwrap()).filter(|r| r[4].parse::<f64>().is_ok()).count();
    assert!(n > 0 && n <= 40);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["accuracy"].as_f64().is_some());
    assert_eq!(metrics["confusion"].as_array().unwrap().len(), 3);
}

#[test]
fn supervised_loss_without_labels_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let tr = dir.path().join("train.csv");
    generate(&tr, "50", "1");
    let out = efe(&[
        "train", "--loss", "lovasz", "--mode", "ngnp", "--train", s(&tr), "--val", s(&tr), "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let tr = dir.path().join("train.csv");
    generate(&tr, "50", "1");
    let o = dir.path().join("o");
    let base = ["train", "--loss", "ce", "--mode", "grnp", "--train", s(&tr), "--val"];

    let missing = dir.path().join("nope.csv");
    let out = efe(&[&base[..], &[s(&missing), "--out-dir", s(&o)]].concat());
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"max_iterations": 5, "learning_rate": 0.1}"#).unwrap();
    let out = efe(&[&base[..], &[s(&tr), "--out-dir", s(&o), "--config", s(&bad)]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = efe(&["train", "--loss", "hinge", "--mode", "grnp"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn focal_without_modulation_matches_cross_entropy_history() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = (dir.path().join("train.csv"), dir.path().join("val.csv"));
    generate(&tr, "150", "5");
    generate(&va, "60", "6");
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"max_iterations": 60, "seed": 3}"#).unwrap();
    let mut histories = Vec::new();
    for (name, extra) in [("ce", &[][..]), ("focal", &["--gamma", "0"][..])] {
        let out_dir = dir.path().join(name);
        let mut args = vec![
            "train", "--loss", name, "--mode", "grpr", "--train", s(&tr), "--val", s(&va), "--config", s(&config),
            "--out-dir", s(&out_dir),
        ];
        args.extend_from_slice(extra);
        assert!(efe(&args).status.success());
        histories.push(std::fs::read(out_dir.join("history.csv")).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
}

#[test]
fn verify_reports_and_exit_codes() {
    let out = efe(&["--no-timestamp", "verify", "--suite", "lovasz", "--trials", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(!text.is_empty() && text.lines().all(|l| l.starts_with("PASS ")));

    let out = efe(&["--no-timestamp", "verify", "--suite", "kelly", "--trials", "30", "--seed", "8"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).lines().count() >= 6);

    let out = efe(&["verify", "--suite", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}
