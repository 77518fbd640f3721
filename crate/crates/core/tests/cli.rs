use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn elana(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elana")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sim_backend() -> String {
    format!("simulated:{}", fixture("sim.json").display())
}

const SMALL: [&str; 10] = ["--prompt-len", "64", "--gen-len", "16", "--runs", "5", "--runs-ttlt", "3", "--warmup", "1"];

#[test]
fn size_table_for_llama_like_config() {
    let arch = fixture("llama-3.1-8b.config.json");
    let inv = fixture("llama-3.1-8b.inventory.json");
    let o = elana(&[
        "size",
        "--arch",
        arch.to_str().unwrap(),
        "--inventory",
        inv.to_str().unwrap(),
        "--batch-size",
        "128",
        "--prompt-len",
        "1024",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("17.18 GB"), "{out}");
    assert!(out.contains("16.06 GB"), "{out}");
    assert!(!out.contains("TTFT"));
}

#[test]
fn binary_units() {
    let arch = fixture("llama-3.1-8b.config.json");
    let o = elana(&["size", "--arch", arch.to_str().unwrap(), "--batch-size", "128", "--prompt-len", "1024", "--units", "gib"]);
    assert!(stdout(&o).contains("16.00 GiB"), "{}", stdout(&o));
}

#[test]
fn missing_backend_config_is_runtime_failure() {
    let o = elana(&["latency", "--backend", "simulated:/nonexistent/sim.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/sim.json"));
}

#[test]
fn user_errors_exit_2() {
    let backend = sim_backend();
    let cases: [&[&str]; 5] = [
        &["latency", "--backend", &backend, "--prompt-len", "0"],
        &["latency", "--backend", &backend, "--no-such-flag"],
        &["latency", "--backend", &backend, "--energy"],
        &["benchmark"],
        &[],
    ];
    for args in cases {
        let o = elana(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn version_matches_report() {
    let o = elana(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    let version = line.trim().strip_prefix("elana ").unwrap().to_string();

    let backend = sim_backend();
    let mut args = vec!["latency", "--backend", &backend, "--output", "json", "--metrics", "ttft"];
    args.extend(SMALL);
    let doc: Value = serde_json::from_slice(&elana(&args).stdout).unwrap();
    assert_eq!(doc["tool_version"], version.as_str());
}

#[test]
fn full_simulated_run_with_energy() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.trace.json");
    let report = dir.path().join("report.json");
    let power = dir.path().join("power.jsonl");
    let backend = sim_backend();
    let mut args = vec![
        "latency",
        "--backend",
        &backend,
        "--energy",
        "--power-source",
        "mock-const:100",
        "--power-interval",
        "0.01",
        "--output",
        "both",
        "--trace",
        trace.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--power-log",
        power.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = elana(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let header = out.lines().find(|l| l.contains("TTFT (ms)")).unwrap();
    let cols: Vec<&str> = header.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(cols, ["TTFT (ms)", "J/Prompt", "TPOT (ms)", "J/Token", "TTLT (ms)", "J/Request"]);

    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["j_per_prompt", "j_per_token", "j_per_request"] {
        assert!(doc["energy"][key].as_f64().unwrap() > 0.0, "{key}");
    }
    let ttlt_ms = doc["latencies"]["TTLT"]["mean_ms"].as_f64().unwrap();
    let j = doc["energy"]["j_per_request"].as_f64().unwrap();
    assert!((j - 100.0 * ttlt_ms / 1e3).abs() < 1e-9);
    assert!(doc["sizes"].is_null());
    assert!(doc["latencies"]["TTFT"].get("samples").is_none());

    let events = elana::trace::parse_trace_json(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    for name in ["TTFT", "TPOT", "TTLT", "prefill", "attention"] {
        assert!(events.iter().any(|e| e.name == name), "no {name} span");
    }
    assert_eq!(doc["trace_path"], trace.to_str().unwrap());
    let samples = elana::energy::read_power_log(&power).unwrap();
    assert!(samples.iter().all(|s| s.device_id == "mock0" && s.watts == 100.0));
    assert!(!samples.is_empty());
}

#[test]
fn run_log_appends_one_line_per_invocation() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("runs.jsonl");
    let backend = sim_backend();
    for seed in ["1", "2", "3"] {
        let mut args = vec!["latency", "--backend", &backend, "--metrics", "tpot", "--seed", seed, "--output", "json"];
        args.extend(SMALL);
        args.extend(["--run-log", log.to_str().unwrap()]);
        assert_eq!(elana(&args).status.code(), Some(0));
    }
    let reports = elana::report::read_run_log(&log).unwrap();
    let seeds: Vec<u64> = reports.iter().map(|r| r.workload.seed).collect();
    assert_eq!(seeds, [1, 2, 3]);
}

#[test]
fn decode_graph_fallback_is_footnoted() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("nograph.json");
    std::fs::write(&config, r#"{"decode_step_ms": 1.0, "prefill_base_ms": 2.0, "supports_decode_graph": false}"#).unwrap();
    let backend = format!("simulated:{}", config.display());
    let mut args = vec!["latency", "--backend", &backend, "--metrics", "tpot"];
    args.extend(SMALL);
    let o = elana(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("* decode-graph-fallback"), "{}", stdout(&o));
}
