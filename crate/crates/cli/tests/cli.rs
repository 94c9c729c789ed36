use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gcm::io::{load_model, load_sessions};
use gcm::models::{build_czm, write_definition};

fn gcm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn simulate_small(dir: &Path, name: &str, seed: &str) {
    let o = gcm(
        dir,
        &["simulate", "--users", "300", "--items", "12", "--list-size", "4", "--seed", seed, "--out", name],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulation_bytes_depend_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.jsonl", "b.jsonl"] {
        assert_eq!(code(&gcm(dir.path(), &["simulate", "--users", "1", "--seed", "7", "--out", out])), 0);
    }
    let p = dir.path();
    assert_eq!(fs::read(p.join("a.jsonl")).unwrap(), fs::read(p.join("b.jsonl")).unwrap());
    assert_eq!(
        fs::read(p.join("a.jsonl.truth.json")).unwrap(),
        fs::read(p.join("b.jsonl.truth.json")).unwrap()
    );
}

#[test]
fn tiny_catalogue_gives_a_valid_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = gcm(dir.path(), &["simulate", "--list-size", "3", "--items", "3", "--users", "50", "--out", "tiny.jsonl"]);
    assert_eq!(code(&o), 0);
    let log = load_sessions(&dir.path().join("tiny.jsonl")).unwrap();
    assert_eq!(log.list_size, 3);
    assert!(log.item_count() <= 3 && !log.is_empty());
}

#[test]
fn fit_converges_with_a_nondecreasing_trace() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "1");
    let o = gcm(dir.path(), &["fit", "--model", "czm", "--data", "log.jsonl", "--out", "m.json", "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("m.json.trace.jsonl")).unwrap();
    let ll: Vec<f64> = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loglik"].as_f64().unwrap())
        .collect();
    assert!(ll.len() >= 2);
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    assert!(load_model(&dir.path().join("m.json")).unwrap().report.converged);
}

#[test]
fn zero_iterations_keep_the_start_and_signal_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "2");
    let o = gcm(dir.path(), &["fit", "--model", "ubm", "--data", "log.jsonl", "--out", "m.json", "--max-iter", "0"]);
    assert_eq!(code(&o), 3);
    let m = load_model(&dir.path().join("m.json")).unwrap();
    assert_eq!(m.weights, m.definition.default_weights());
}

#[test]
fn single_thread_fits_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "3");
    for out in ["a.json", "b.json"] {
        let o = gcm(dir.path(), &["fit", "--model", "czm", "--data", "log.jsonl", "--out", out, "--threads", "1", "--init", "random", "--seed", "5"]);
        assert_eq!(code(&o), 0);
    }
    let p = dir.path();
    assert_eq!(fs::read(p.join("a.json")).unwrap(), fs::read(p.join("b.json")).unwrap());
}

#[test]
fn definition_files_fit_like_the_builtin() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "4");
    let log = load_sessions(&dir.path().join("log.jsonl")).unwrap();
    let text = write_definition(&build_czm(log.list_size, log.item_count()).unwrap()).unwrap();
    fs::write(dir.path().join("czm.gcm"), text).unwrap();
    for (model, out) in [("czm", "builtin.json"), ("czm.gcm", "custom.json")] {
        assert_eq!(code(&gcm(dir.path(), &["fit", "--model", model, "--data", "log.jsonl", "--out", out, "--threads", "1"])), 0);
    }
    let a = load_model(&dir.path().join("builtin.json")).unwrap();
    let b = load_model(&dir.path().join("custom.json")).unwrap();
    assert_eq!(a.weights, b.weights);
}

#[test]
fn evaluation_beats_the_baseline_and_rescoring_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "5");
    for (model, out) in [("czm", "czm.json"), ("ubm", "ubm.json")] {
        let o = gcm(dir.path(), &["fit", "--model", model, "--data", "log.jsonl", "--out", out, "--threads", "1"]);
        assert!(matches!(code(&o), 0 | 3));
    }
    for out in ["r1.json", "r2.json"] {
        let o = gcm(
            dir.path(),
            &["evaluate", "--model", "czm.json", "--model", "ubm.json", "--data", "log.jsonl", "--truth", "log.jsonl.truth.json", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let p = dir.path();
    assert_eq!(fs::read(p.join("r1.json")).unwrap(), fs::read(p.join("r2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r1.json")).unwrap()).unwrap();
    for m in report.as_array().unwrap() {
        for r in m["perplexity"]["per_rank"].as_array().unwrap() {
            assert!(r.as_f64().unwrap() < 2.0);
        }
    }
    assert!(report[0]["recovery"]["mean_abs_error"].as_f64().unwrap() < 0.2);
    let plot = fs::read_to_string(p.join("r1.json.plot.tsv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 2 * (4 + 1));

    let o = gcm(dir.path(), &["predict", "--model", "czm.json", "--data", "log.jsonl", "--out", "pred.jsonl"]);
    assert_eq!(code(&o), 0);
    let preds = fs::read_to_string(p.join("pred.jsonl")).unwrap();
    let log = load_sessions(&p.join("log.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), log.len());
}

#[test]
fn corrupt_line_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "6");
    let text = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[16] = "{\"id\": broken";
    fs::write(dir.path().join("bad.jsonl"), lines.join("\n")).unwrap();
    let o = gcm(dir.path(), &["fit", "--model", "czm", "--data", "bad.jsonl", "--out", "m.json"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 17"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "7");
    fs::write(dir.path().join("empty.jsonl"), "{\"format\":\"gcm-sessions\",\"version\":1,\"list_size\":4}\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["fit", "--model", "nope", "--data", "log.jsonl", "--out", "m.json"],
        &["fit", "--data", "log.jsonl"],
        &["simulate", "--out", "x.jsonl", "--lifetime-p", "0"],
        &["fit", "--model", "czm", "--data", "empty.jsonl", "--out", "m.json"],
    ];
    for args in cases {
        assert_eq!(code(&gcm(dir.path(), args)), 1, "{args:?}");
    }
}

#[test]
fn schema_mismatch_between_model_and_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate_small(dir.path(), "log.jsonl", "8");
    assert_eq!(code(&gcm(dir.path(), &["fit", "--model", "czm", "--data", "log.jsonl", "--out", "m.json", "--max-iter", "2"])), 3);
    let o = gcm(dir.path(), &["simulate", "--users", "20", "--list-size", "3", "--items", "12", "--out", "other.jsonl"]);
    assert_eq!(code(&o), 0);
    let o = gcm(dir.path(), &["evaluate", "--model", "m.json", "--data", "other.jsonl", "--out", "r.json"]);
    assert_eq!(code(&o), 2);
}
