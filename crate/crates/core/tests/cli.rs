//! The `wander` binary end to end.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn wander(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wander")).args(args).output().unwrap()
}

fn write_config(dir: &Path, generations: u32) -> String {
    let path = dir.join("config.json");
    let config = json!({
        "initial_prompt": "a paper boat on a flooded street",
        "generations": generations,
        "seed": 12,
        "provider": {"kind": "synthetic"}
    });
    fs::write(&path, config.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn report_csv_recomputes_from_the_event_log() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), 6);
    let run_dir = tmp.path().join("run");
    let run = run_dir.to_str().unwrap();
    stdout(&wander(&["run", "--config", &config, "--out", run]));

    let csv = stdout(&wander(&["report", run, "--csv"]));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "generation,pool_size,vendi,mean_pairwise_distance,min_novelty,relevance,cumulative_tokens,lpips"
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 7);

    let log = fs::read_to_string(run_dir.join("events.jsonl")).unwrap();
    let want = common::metrics_from_log(&log, 3);
    assert_eq!(want.len(), rows.len());
    for (g, (row, w)) in rows.iter().zip(&want).enumerate() {
        let f = |i: usize| row[i].parse::<f64>().unwrap();
        assert_eq!(row[0], g.to_string());
        assert_eq!(row[1], "10");
        assert!((f(2) - w.0).abs() < 1e-9, "gen {g} vendi {} vs {}", f(2), w.0);
        assert!((f(3) - w.1).abs() < 1e-9, "gen {g} distance");
        assert!((f(4) - w.2).abs() < 1e-9, "gen {g} min novelty");
        assert!((f(5) - w.3).abs() < 1e-9, "gen {g} relevance");
        assert_eq!(row[6].parse::<u64>().unwrap(), w.4, "gen {g} tokens");
        assert_eq!(row[7], "");
    }

    let summary = stdout(&wander(&["report", run]));
    assert!(summary.contains("strategy bandit"));
    assert!(summary.contains("tokens: total"));
    assert!(summary.contains("embedder calls: 131"));

    let matrix = stdout(&wander(&["report", run, "--similarity-matrix", "3"]));
    assert_eq!(matrix.lines().count(), 10);
    assert!(matrix.lines().all(|l| l.split(',').count() == 10));
}

#[test]
fn resume_finishes_an_interrupted_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), 2);
    let a = tmp.path().join("a");
    stdout(&wander(&["run", "--config", &config, "--out", a.to_str().unwrap()]));
    // Simulate a crash after generation 1: drop the tail of the log and metrics.
    let b = tmp.path().join("b");
    fs::create_dir_all(b.join("snapshots")).unwrap();
    fs::copy(a.join("manifest.json"), b.join("manifest.json")).unwrap();
    fs::copy(a.join("snapshots/gen-1.json"), b.join("snapshots/gen-1.json")).unwrap();
    fs::copy(a.join("snapshots/gen-0.json"), b.join("snapshots/gen-0.json")).unwrap();
    let events = fs::read_to_string(a.join("events.jsonl")).unwrap();
    let keep: Vec<&str> = events.lines().take(10 + 14).collect();
    fs::write(b.join("events.jsonl"), keep.join("\n") + "\n").unwrap();
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    fs::write(b.join("metrics.jsonl"), metrics.lines().take(2).collect::<Vec<_>>().join("\n") + "\n").unwrap();

    stdout(&wander(&["resume", b.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(b.join("events.jsonl")).unwrap(), events);
    assert_eq!(fs::read_to_string(b.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("config.json");
    fs::write(&path, r#"{"initial_prompt": "x", "k": 0}"#).unwrap();
    let o = wander(&["run", "--config", path.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&path, "{not json").unwrap();
    let o = wander(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = wander(&["ablate", "--config", path.to_str().unwrap(), "--strategies", "greedy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_store_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), 1);
    let run = tmp.path().join("run");
    stdout(&wander(&["run", "--config", &config, "--out", run.to_str().unwrap()]));
    let events = fs::read_to_string(run.join("events.jsonl")).unwrap();
    let mut lines: Vec<String> = events.lines().map(String::from).collect();
    lines[3] = "{\"record\": \"seed\", \"individ".into();
    fs::write(run.join("events.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = wander(&["report", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let o = wander(&["report", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn ablate_and_qdaif_write_their_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), 2);
    let table = stdout(&wander(&["ablate", "--config", &config, "--runs", "2", "--strategies", "none,random", "--csv"]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("none,2,") && rows[2].starts_with("random,2,"));

    let q = tmp.path().join("q");
    stdout(&wander(&["qdaif", "--config", &config, "--out", q.to_str().unwrap()]));
    for f in ["events.jsonl", "grid.csv", "grid_manifest.json", "summary.json"] {
        assert!(q.join(f).is_file(), "{f}");
    }
    let run = tmp.path().join("run");
    stdout(&wander(&["run", "--config", &config, "--out", run.to_str().unwrap()]));
    let report = stdout(&wander(&["report", run.to_str().unwrap(), "--qdaif", q.to_str().unwrap()]));
    assert!(report.contains("qdaif"));
}
