use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gncde(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gncde"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = gncde(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    gncde(args, cwd).status.code().expect("exited normally")
}

/// Flags for a model small enough to train in well under a second.
const TINY: [&str; 8] = [
    "--set",
    "model.d_h=4",
    "--set",
    "model.d_z=4",
    "--width",
    "4",
    "--batch-size",
    "8",
];

/// Table rows following the line `title`, parsed until the next blank line.
fn table_after(text: &str, title: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip_while(|l| !l.starts_with(title))
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|c| c.parse().unwrap()).collect())
        .collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&[], dir.path()), 2);
    assert_eq!(code(&["inspect", "--no-such-flag"], dir.path()), 2);
    assert_eq!(code(&["frobnicate"], dir.path()), 2);
    assert_eq!(code(&["--help"], dir.path()), 0);
}

#[test]
fn inspect_prints_the_four_node_routing() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["inspect", "--graph", "g4", "--precision", "6"], dir.path());
    assert!(text.starts_with("4 vertices, 5 edges"), "{text}");

    // independent oracle: enumerate edges row-major, route tail weight to
    // every edge whose head feeds this edge's tail
    let adjacency = [
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.3, 0.7],
        [0.0, 0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0, 0.0],
    ];
    let mut edges = Vec::new();
    for (u, row) in adjacency.iter().enumerate() {
        for (v, &p) in row.iter().enumerate() {
            if p > 0.0 {
                edges.push((u, v, p));
            }
        }
    }
    let expected: Vec<Vec<f64>> = edges
        .iter()
        .map(|&(tail, _, p)| {
            edges
                .iter()
                .map(|&(_, head, _)| if head == tail { p } else { 0.0 })
                .collect()
        })
        .collect();
    let printed = table_after(&text, "edge transition");
    assert_eq!(printed, expected);
}

#[test]
fn unknown_config_keys_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = gncde(
        &[
            "simulate",
            "--graph",
            "g4",
            "--set",
            "simulation.sigma=3",
            "--out",
            "d.bin",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("simulation.sigma") && err.contains("shift_per_step"),
        "{err}"
    );
    assert_eq!(code(&["inspect", "--graph", "missing.json"], dir.path()), 3);
}

#[test]
fn simulate_summarise_and_export() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "simulate", "--graph", "g4", "--series", "12", "--seed", "5", "--out", "d.bin",
        ],
        dir.path(),
    );
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("d.bin.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["n_series"], 12);
    assert_eq!(manifest["config"]["simulation"]["seed"], 5);
    assert_eq!(manifest["graph"]["n_vertices"], 4);

    let summary = ok(&["dataset", "--data", "d.bin"], dir.path());
    assert!(summary.contains("windows      12 (input 25, target 24)"), "{summary}");

    ok(&["export-csv", "--data", "d.bin", "--out", "d.csv"], dir.path());
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample,t,v1,v2,v3,v4"));
    // 12 series of 49 measurements each
    assert_eq!(lines.count(), 12 * 49);
    assert_eq!(ok(&["export-csv", "--data", "d.bin"], dir.path()), csv);

    // same seed, same bytes
    ok(
        &[
            "simulate", "--graph", "g4", "--series", "12", "--seed", "5", "--out", "e.bin",
        ],
        dir.path(),
    );
    assert_eq!(
        std::fs::read(dir.path().join("d.bin")).unwrap(),
        std::fs::read(dir.path().join("e.bin")).unwrap()
    );
}

#[test]
fn train_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["simulate", "--graph", "g4", "--series", "24", "--out", "d.bin"], p);

    let mut args = vec!["train", "--data", "d.bin", "--out", "full"];
    args.extend(TINY);
    args.extend(["--epochs", "3"]);
    ok(&args, p);
    for f in ["checkpoint.bin", "metrics.ndjson", "summary.json", "manifest.json"] {
        assert!(p.join("full").join(f).is_file(), "missing {f}");
    }

    let mut args = vec!["train", "--data", "d.bin", "--out", "split"];
    args.extend(TINY);
    args.extend(["--epochs", "2"]);
    ok(&args, p);
    ok(
        &[
            "train",
            "--data",
            "d.bin",
            "--epochs",
            "3",
            "--resume",
            "split/checkpoint.bin",
            "--out",
            "split",
        ],
        p,
    );
    // identical logs apart from wall-clock time
    let records = |dir: &str| -> Vec<Value> {
        std::fs::read_to_string(p.join(dir).join("metrics.ndjson"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v
            })
            .collect()
    };
    assert_eq!(records("full"), records("split"));

    let summary: Value = serde_json::from_str(&std::fs::read_to_string(p.join("full/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_run"], 3);
    assert_eq!(summary["inner"], "identity");
    assert_eq!(summary["outer"], "informed");
    let test_mae = summary["test_mae"].as_f64().unwrap();
    let printed: f64 = ok(&["eval", "--checkpoint", "full/checkpoint.bin", "--data", "d.bin"], p)
        .trim()
        .parse()
        .unwrap();
    assert!((printed - test_mae).abs() < 1e-8, "{printed} vs {test_mae}");
    let resumed: f64 = ok(&["eval", "--checkpoint", "split/checkpoint.bin", "--data", "d.bin"], p)
        .trim()
        .parse()
        .unwrap();
    assert_eq!(printed, resumed);
    ok(
        &[
            "eval",
            "--checkpoint",
            "full/checkpoint.bin",
            "--data",
            "d.bin",
            "--split",
            "all",
            "--latest",
        ],
        p,
    );
}

#[test]
fn grid_writes_one_row_per_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut args = vec![
        "grid", "--graph", "g4", "--series", "10", "--seeds", "0,1", "--out", "grid.csv",
    ];
    args.extend(TINY);
    args.extend(["--epochs", "1"]);
    ok(&args, p);
    let csv = std::fs::read_to_string(p.join("grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("inner,outer,mae,n_params,epochs_to_threshold,seed"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r[5] == "1").count(), 5);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap().is_finite()));
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("grid.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1]));
    assert_eq!(manifest["config"]["model"]["hidden_width"], 4);
}
