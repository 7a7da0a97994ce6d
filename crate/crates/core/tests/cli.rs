mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn parsearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parsearch"))
        .args(args)
        .env_remove("PARSEARCH_CONFIG")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("out");
    let result = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
        "--parallelism",
        "3",
    ]);
    assert_eq!(
        code(&result),
        0,
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    for file in ["traces.jsonl", "report.json", "report.csv", "manifest.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 20);
    assert_eq!(report["config_manifest"]["rewards"]["lambda_d"], 0.15);
    assert_eq!(report["config_manifest"]["rewards"]["lambda_s"], 0.35);
    assert_eq!(report["config_manifest"]["settings"]["parallelism"], 3);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("section,key,value\n"));
    assert_eq!(
        std::fs::read_to_string(out.join("traces.jsonl"))
            .unwrap()
            .lines()
            .count(),
        20
    );

    let audit = parsearch(&[
        "audit",
        "--traces",
        s(&out.join("traces.jsonl")),
        "--dataset",
        s(&paths.dataset),
    ]);
    assert_eq!(code(&audit), 0);
    assert_eq!(String::from_utf8_lossy(&audit.stdout).lines().count(), 20);

    let replay = parsearch(&[
        "replay",
        "--traces",
        s(&out.join("traces.jsonl")),
        "--dataset",
        s(&paths.dataset),
        "--lambda-s",
        "0.5",
    ]);
    assert_eq!(
        code(&replay),
        0,
        "{}",
        String::from_utf8_lossy(&replay.stderr)
    );
    let replayed: Value = serde_json::from_slice(&replay.stdout).unwrap();
    assert_eq!(replayed["config_manifest"]["rewards"]["lambda_s"], 0.5);
    assert_eq!(replayed["config_manifest"]["settings"]["parallelism"], 3);
    assert_eq!(replayed["em_mean"], report["em_mean"]);

    let bad_alpha = parsearch(&[
        "replay",
        "--traces",
        s(&out.join("traces.jsonl")),
        "--dataset",
        s(&paths.dataset),
        "--alpha",
        "1.0",
    ]);
    assert_eq!(code(&bad_alpha), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("out");
    let both = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--retriever-endpoint",
        "http://127.0.0.1:1",
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&both), 2);
    assert!(!out.exists());

    let bad_k = parsearch(&[
        "sweep-topk",
        "--ks",
        "1,11",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&bad_k), 2);
    assert!(!out.exists());

    let rules = parsearch(&[
        "split",
        "--dataset",
        s(&paths.dataset),
        "--rules",
        "nq",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&rules), 2);

    let no_policy = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&no_policy), 2);
}

#[test]
fn unreachable_endpoint_exits_3_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("out");
    let result = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--retriever-endpoint",
        "http://127.0.0.1:1",
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        code(&result),
        3,
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["failed"].as_u64().unwrap() > 0);
}

#[test]
fn data_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("out");

    let scripts = std::fs::read_to_string(&paths.scripts).unwrap();
    let partial = dir.path().join("partial.jsonl");
    std::fs::write(
        &partial,
        scripts.lines().skip(1).collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    let missing_script = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&partial),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&missing_script), 4);

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"x\"}\n").unwrap();
    let bad_dataset = parsearch(&[
        "run",
        "--dataset",
        s(&broken),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&bad_dataset), 4);

    let excluded = dir.path().join("excluded.jsonl");
    std::fs::write(
        &excluded,
        "{\"id\":\"m\",\"question\":\"q?\",\"golden_answers\":[\"a\"],\"source\":\"musique\",\"category\":\"2hop\"}\n",
    )
    .unwrap();
    let unclassified = parsearch(&[
        "run",
        "--dataset",
        s(&excluded),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&unclassified), 4);
}

#[test]
fn config_file_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("from-config");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "dataset = {:?}\ncorpus = {:?}\nscript = {:?}\nout = {:?}\n\n[rollout]\ntopk = 2\n\n[rewards]\nlambda_d = 0.0\n",
            s(&paths.dataset), s(&paths.corpus), s(&paths.scripts), s(&out)
        ),
    )
    .unwrap();
    let result = Command::new(env!("CARGO_BIN_EXE_parsearch"))
        .args(["run", "--max-turns", "5"])
        .env("PARSEARCH_CONFIG", &config)
        .output()
        .unwrap();
    assert_eq!(
        code(&result),
        0,
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let manifest = &report["config_manifest"];
    assert_eq!(manifest["rollout"]["topk"], 2);
    assert_eq!(manifest["rollout"]["max_turns"], 5);
    assert_eq!(manifest["rewards"]["lambda_d"], 0.0);
}

#[test]
fn split_sweep_bench_index() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());

    let split_out = dir.path().join("split");
    let split = parsearch(&[
        "split",
        "--dataset",
        s(&paths.dataset),
        "--out",
        s(&split_out),
    ]);
    assert_eq!(code(&split), 0);
    let summary: Value = serde_json::from_slice(&split.stdout).unwrap();
    assert_eq!(summary["par"], 9);
    assert_eq!(summary["seq"], 6);
    assert_eq!(summary["excluded"], 5);
    let par = std::fs::read_to_string(split_out.join("questions-par.jsonl")).unwrap();
    assert_eq!(par.lines().count(), 9);

    let only_hotpot = parsearch(&[
        "split",
        "--dataset",
        s(&paths.dataset),
        "--rules",
        "hotpotqa",
        "--out",
        s(&split_out),
    ]);
    let summary: Value = serde_json::from_slice(&only_hotpot.stdout).unwrap();
    assert_eq!(
        (summary["par"].as_u64(), summary["seq"].as_u64()),
        (Some(4), Some(3))
    );

    let sweep_out = dir.path().join("sweep");
    let sweep = parsearch(&[
        "sweep-topk",
        "--ks",
        "1,3",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&sweep_out),
    ]);
    assert_eq!(
        code(&sweep),
        0,
        "{}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    assert!(sweep_out.join("k1/report.json").exists());
    assert!(sweep_out.join("k3/report.json").exists());

    let bench = parsearch(&["bench", "--latency-ms", "0"]);
    assert_eq!(code(&bench), 0);
    let report: Value = serde_json::from_slice(&bench.stdout).unwrap();
    let ratio = report["call_ratio"].as_f64().unwrap();
    assert!((ratio - 2.0 / 3.0).abs() < 1e-12);

    let index = parsearch(&[
        "index",
        "--corpus",
        s(&paths.corpus),
        "--query",
        "capital of Ormia",
        "--topk",
        "1",
    ]);
    assert_eq!(code(&index), 0);
    let stats: Value = serde_json::from_slice(&index.stdout).unwrap();
    assert_eq!(stats["documents"], 50);
    assert_eq!(stats["results"][0]["doc_id"], "region-1");
}

#[test]
fn unreachable_policy_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let result = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--policy-endpoint",
        "http://127.0.0.1:1",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&result), 3);
    assert!(String::from_utf8_lossy(&result.stderr).contains("transport"));
}

#[test]
fn zero_lambda_s_zeroes_count_reward() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::write_world(dir.path());
    let out = dir.path().join("out");
    let run = parsearch(&[
        "run",
        "--dataset",
        s(&paths.dataset),
        "--corpus",
        s(&paths.corpus),
        "--script",
        s(&paths.scripts),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&run), 0);
    let traces = out.join("traces.jsonl");
    let replay = parsearch(&[
        "replay",
        "--traces",
        s(&traces),
        "--dataset",
        s(&paths.dataset),
        "--lambda-s",
        "0",
    ]);
    assert_eq!(code(&replay), 0);
    let report: Value = serde_json::from_slice(&replay.stdout).unwrap();
    let episodes = report["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), 20);
    assert!(episodes.iter().all(|e| e["reward"]["r_s"] == 0.0));

    let defaults = parsearch(&[
        "replay",
        "--traces",
        s(&traces),
        "--dataset",
        s(&paths.dataset),
    ]);
    let report: Value = serde_json::from_slice(&defaults.stdout).unwrap();
    assert_eq!(report["config_manifest"]["rewards"]["lambda_d"], 0.15);
    assert_eq!(report["config_manifest"]["rewards"]["lambda_s"], 0.35);
}

#[test]
fn bench_reports_retrieval_wall() {
    for (mode, calls, check) in [
        ("parallel", 2, (|ms: f64| ms < 150.0) as fn(f64) -> bool),
        ("sequential", 3, |ms: f64| ms >= 200.0),
    ] {
        let out = parsearch(&["bench", "--mode", mode, "--latency-ms", "100"]);
        assert_eq!(code(&out), 0);
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        let m = &report["modes"][0];
        assert_eq!(m["policy_calls"], calls);
        let ms = m["avg_retrieval_ms"].as_f64().unwrap();
        assert!(check(ms), "{mode}: {ms} ms");
        assert!(report["call_ratio"].is_null());
    }
}

#[test]
fn split_may_be_empty() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("nq.jsonl");
    std::fs::write(
        &dataset,
        "{\"id\":\"n\",\"question\":\"q?\",\"golden_answers\":[\"a\"],\"source\":\"nq\"}\n",
    )
    .unwrap();
    let out = dir.path().join("split");
    let result = parsearch(&["split", "--dataset", s(&dataset), "--out", s(&out)]);
    assert_eq!(code(&result), 0);
    assert_eq!(
        std::fs::read_to_string(out.join("nq-par.jsonl")).unwrap(),
        ""
    );
    assert_eq!(
        std::fs::read_to_string(out.join("nq-seq.jsonl")).unwrap(),
        ""
    );
}
