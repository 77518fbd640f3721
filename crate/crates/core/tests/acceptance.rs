//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use serde_json::Value;

use elana::backend::{ClockMode, SimulatedBackend, SimulatedBackendConfig};
use elana::clock::RealClock;
use elana::energy::{energy_metrics, mean_power, start_sampler, stop_sampler, PowerSourceDesc};
use elana::latency::{measure_tpot, measure_ttft, measure_ttlt, Metric, PhaseListener, Probes, Workload};
use elana::sizing::{cache_size, format_bytes, param_and_buffer_size, parse_arch, ParamEntry, ParamInventory, UnitMode};
use elana::trace::{aggregate_ops, parse_trace_json, trace_json, TraceEvent, Track};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn arch(name: &str) -> elana::sizing::ArchConfig {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    parse_arch(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn sim(config: SimulatedBackendConfig) -> SimulatedBackend {
    SimulatedBackend::new(config).unwrap()
}

fn cache_fixtures() -> Check {
    let table = [
        ("llama-3.1-8b.config.json", ["0.13 GB", "17.18 GB", "34.36 GB"]),
        ("qwen-2.5-7b.config.json", ["0.06 GB", "7.52 GB", "15.03 GB"]),
    ];
    let shapes = [(1, 1024), (128, 1024), (128, 2048)];
    for (file, expected) in table {
        let a = arch(file);
        for ((b, l), want) in shapes.iter().zip(expected) {
            let got = cache_size(&a, *b, *l, None).map_err(|e| e.to_string())?.total_bytes;
            let got = format_bytes(got, UnitMode::Si, 2);
            ensure(got == want, format!("{file} b={b} L={l}: {got} != {want}"))?;
        }
    }
    // the same dims given directly rather than through a hub config
    let direct = elana::sizing::ArchConfig::transformer("direct", 128_256, 32, 8, 128, 2).unwrap();
    let got = cache_size(&direct, 128, 1024, None).unwrap().total_bytes;
    ensure(format_bytes(got, UnitMode::Si, 2) == "17.18 GB", "direct llama dims")?;
    Ok("6/6 cells".into())
}

fn param_fixtures() -> Check {
    for (count, want) in [(8_030_000_000u64, "16.06 GB"), (7_615_000_000, "15.23 GB")] {
        let inv = ParamInventory::new(vec![ParamEntry::param("w", count, 2)]).unwrap();
        let got = format_bytes(param_and_buffer_size(&inv).0, UnitMode::Si, 2);
        ensure(got == want, format!("{count} elements: {got} != {want}"))?;
    }
    for (file, want) in [("llama-3.1-8b.inventory.json", "16.06 GB"), ("qwen-2.5-7b.inventory.json", "15.23 GB")] {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(fixture(file)).unwrap()).unwrap();
        let inv = ParamInventory::from_json(&doc).map_err(|e| e.to_string())?;
        let got = format_bytes(param_and_buffer_size(&inv).0, UnitMode::Si, 2);
        ensure(got == want, format!("{file}: {got} != {want}"))?;
    }
    Ok("scalar and per-tensor inventories".into())
}

fn workload(gen_len: usize, runs: u32) -> Workload {
    Workload { batch: 1, prompt_len: 32, gen_len, runs, warmup: 2, ..Workload::default() }
}

fn harness_correctness() -> Check {
    // virtual clock: randomized configurations, exact expectations
    let mut runner = TestRunner::new(Config { cases: 24, failure_persistence: None, ..Config::default() });
    runner
        .run(
            &(0.1f64..50.0, 0.0f64..0.05, 0.1f64..30.0, 0.2f64..=1.0, 0.0f64..500.0, prop::sample::select(vec![2usize, 64, 512])),
            |(base, per_tok, step, speedup, penalty, t_g)| {
                let config = SimulatedBackendConfig {
                    prefill_base_ms: base,
                    prefill_per_token_ms: per_tok,
                    decode_step_ms: step,
                    decode_graph_speedup: speedup,
                    warmup_penalty_ms: penalty,
                    ..SimulatedBackendConfig::default()
                };
                let eff = config.decode_ms(true);
                let prefill = config.prefill_ms(1, 32);
                let mut b = sim(config.clone());
                let tpot = measure_tpot(&mut b, &workload(t_g, 3), &Probes::default()).unwrap();
                prop_assert!((tpot.mean_ms - eff).abs() < 0.5);
                prop_assert!(tpot.max_ms < eff + 0.01);
                let mut b = sim(config.clone());
                let (ttlt, _) = measure_ttlt(&mut b, &workload(t_g, 2), &Probes::default()).unwrap();
                let want = prefill + (t_g - 1) as f64 * eff;
                prop_assert!((ttlt.mean_ms - want).abs() <= 0.02 * want);
                prop_assert!(ttlt.max_ms < want + 0.01);
                let mut b = sim(config);
                let ttft = measure_ttft(&mut b, &workload(t_g, 3), &Probes::default()).unwrap();
                prop_assert!(ttft.max_ms < prefill + 0.01);
                Ok(())
            },
        )
        .map_err(|e| format!("virtual clock: {e}"))?;

    // real clock with millisecond-scale steps
    let started = Instant::now();
    let config = SimulatedBackendConfig {
        prefill_base_ms: 10.0,
        decode_step_ms: 2.0,
        decode_graph_speedup: 1.0,
        warmup_penalty_ms: 300.0,
        clock: ClockMode::Real,
        ..SimulatedBackendConfig::default()
    };
    let mut b = sim(config.clone());
    let tpot = measure_tpot(&mut b, &workload(64, 3), &Probes::default()).map_err(|e| e.to_string())?;
    ensure((tpot.mean_ms - 2.0).abs() < 0.5, format!("real TPOT mean {:.3} ms", tpot.mean_ms))?;
    let mut worst = 0.0f64;
    // more runs for short requests so one scheduler stall cannot dominate the mean
    for (t_g, runs) in [(2usize, 40), (64, 10), (512, 3)] {
        let mut b = sim(config.clone());
        let (ttlt, _) = measure_ttlt(&mut b, &workload(t_g, runs), &Probes::default()).map_err(|e| e.to_string())?;
        let want = config.prefill_ms(1, 32) + (t_g - 1) as f64 * 2.0;
        let rel = (ttlt.mean_ms - want).abs() / want;
        ensure(rel <= 0.02, format!("real TTLT T_g={t_g}: {:.3} ms vs {want:.3} ms", ttlt.mean_ms))?;
        ensure(ttlt.max_ms < want + 150.0, format!("warmup penalty leaked into TTLT T_g={t_g}"))?;
        worst = worst.max(rel);
    }
    let mut b = sim(config);
    let ttft = measure_ttft(&mut b, &workload(2, 5), &Probes::default()).map_err(|e| e.to_string())?;
    ensure(ttft.max_ms < 10.0 + 150.0, "warmup penalty leaked into TTFT")?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("real-clock part took {elapsed:?}"))?;
    Ok(format!("24 virtual cases; real TTLT worst {:.2}% in {:.1} s", worst * 100.0, elapsed.as_secs_f64()))
}

/// Runs TTFT, TPOT and TTLT on a virtual-clock backend with the given power sources.
fn energy_run(sources: &[PowerSourceDesc]) -> (BTreeMap<Metric, elana::latency::LatencyStats>, elana::energy::EnergyMetrics) {
    let config = SimulatedBackendConfig {
        prefill_base_ms: 40.0,
        decode_step_ms: 20.0,
        jitter_ms: 1.0,
        seed: 3,
        ..SimulatedBackendConfig::default()
    };
    let mut b = sim(config);
    let sampler = start_sampler(sources, 0.1, elana::backend::Backend::clock(&b)).unwrap();
    let probes = Probes { phases: Some(&sampler as &dyn PhaseListener), spans: None };
    let w = workload(32, 10);
    let mut lat = BTreeMap::new();
    lat.insert(Metric::Ttft, measure_ttft(&mut b, &w, &probes).unwrap());
    lat.insert(Metric::Tpot, measure_tpot(&mut b, &w, &probes).unwrap());
    lat.insert(Metric::Ttlt, measure_ttlt(&mut b, &w, &probes).unwrap().0);
    let trace = stop_sampler(sampler).unwrap();
    let energy = energy_metrics(&lat, &trace).unwrap();
    (lat, energy)
}

fn energy_integration() -> Check {
    let (lat, e) = energy_run(&[PowerSourceDesc::MockConstant { watts: 100.0 }]);
    let joules = [e.j_per_prompt, e.j_per_token, e.j_per_request];
    for (m, j) in Metric::ALL.iter().zip(joules) {
        let want = 100.0 * lat[m].mean_ms / 1e3;
        ensure(j == Some(want), format!("{m}: {j:?} != {want}"))?;
    }

    // ramp 50 + 10 t W sampled at 0.1 s on the real clock for 10 s
    let clock = RealClock::shared();
    let ramp = PowerSourceDesc::MockScripted { breakpoints: vec![(0.0, 50.0), (1000.0, 10_050.0)] };
    let sampler = start_sampler(&[ramp], 0.1, clock.clone()).map_err(|e| e.to_string())?;
    sampler.mark_phase_start(Metric::Ttlt);
    let t0 = clock.now_ns();
    clock.elapse(10_000_000_000);
    sampler.mark_phase_end(Metric::Ttlt);
    let trace = stop_sampler(sampler).map_err(|e| e.to_string())?;
    let window = trace.phase(Metric::Ttlt).unwrap();
    ensure(window.duration_s() >= 10.0, "ramp window shorter than 10 s")?;
    let measured = mean_power(&trace, window, &trace.devices).map_err(|e| e.to_string())?.total();
    let a = (window.start_ns - trace.start_ns) as f64 / 1e9;
    let z = (window.end_ns - trace.start_ns) as f64 / 1e9;
    let closed_form = 50.0 + 5.0 * (a + z);
    let rel = (measured - closed_form).abs() / closed_form;
    ensure(rel < 0.01, format!("ramp mean {measured:.3} W vs {closed_form:.3} W"))?;
    ensure(t0 >= trace.start_ns, "phase began before sampling")?;

    let (_, one) = energy_run(&[PowerSourceDesc::MockConstant { watts: 50.0 }]);
    let (_, other) = energy_run(&[PowerSourceDesc::MockConstant { watts: 70.0 }]);
    let (_, both) = energy_run(&[
        PowerSourceDesc::MockConstant { watts: 50.0 },
        PowerSourceDesc::MockConstant { watts: 70.0 },
    ]);
    let (a, b, ab) = (one.j_per_request.unwrap(), other.j_per_request.unwrap(), both.j_per_request.unwrap());
    ensure(((a + b) - ab).abs() <= 1e-12 * ab, format!("{a} + {b} != {ab}"))?;
    Ok(format!("ramp error {:.3}% over {} samples; 50 W + 70 W additive", rel * 100.0, trace.samples.len()))
}

fn reported_number_checks() -> Check {
    let (prefill_ms, step_ms, reported_ttlt) = (94.30, 24.84, 12859.85);
    let formula = prefill_ms + 511.0 * step_ms;
    let config = SimulatedBackendConfig {
        prefill_base_ms: prefill_ms,
        decode_step_ms: step_ms,
        ..SimulatedBackendConfig::default()
    };
    let mut b = sim(config.clone());
    let w = Workload { batch: 1, prompt_len: 512, gen_len: 512, runs: 2, warmup: 1, ..Workload::default() };
    let (ttlt, split) = measure_ttlt(&mut b, &w, &Probes::default()).map_err(|e| e.to_string())?;
    ensure((ttlt.mean_ms - formula).abs() < 1e-6, format!("TTLT {} vs {formula}", ttlt.mean_ms))?;
    ensure((split.ttft_portion_ms - prefill_ms).abs() < 1e-6, "TTLT prefill share")?;
    let rel = (formula - reported_ttlt).abs() / reported_ttlt;
    ensure(rel < 0.01, format!("{formula:.2} is {:.2}% from {reported_ttlt}", rel * 100.0))?;

    let watts = 6.80 / (step_ms / 1e3);
    let mut b = sim(config);
    let sampler = start_sampler(&[PowerSourceDesc::MockConstant { watts }], 0.1, elana::backend::Backend::clock(&b))
        .map_err(|e| e.to_string())?;
    let probes = Probes { phases: Some(&sampler as &dyn PhaseListener), spans: None };
    let tpot = measure_tpot(&mut b, &Workload { runs: 3, ..w }, &probes).map_err(|e| e.to_string())?;
    let trace = stop_sampler(sampler).map_err(|e| e.to_string())?;
    let e = energy_metrics(&BTreeMap::from([(Metric::Tpot, tpot)]), &trace).map_err(|e| e.to_string())?;
    let j = e.j_per_token.unwrap();
    ensure(format!("{j:.3}") == "6.800", format!("J/Token {j}"))?;
    Ok(format!("TTLT {formula:.2} ms ({:.2}% off); {watts:.2} W -> {j:.4} J/token", rel * 100.0))
}

fn arb_event() -> impl Strategy<Value = TraceEvent> {
    (
        prop::sample::select(vec!["prefill", "decode_step", "attention", "mlp", "lm_head"]),
        prop::sample::select(vec!["step", "kernel", "phase"]),
        0u64..1_000_000,
        0u64..50_000,
        0u32..4,
        prop::option::of(0u64..1000),
    )
        .prop_map(|(name, cat, ts, dur, tid, arg)| TraceEvent {
            name: name.into(),
            category: cat.into(),
            ts_us: ts,
            dur_us: dur,
            track: Track { pid: 1, tid },
            args: arg.map(|v| BTreeMap::from([("run".to_string(), Value::from(v))])),
        })
}

fn sorted_multiset(events: &[TraceEvent]) -> Vec<String> {
    let mut keys: Vec<String> = events.iter().map(|e| format!("{e:?}")).collect();
    keys.sort();
    keys
}

fn trace_export() -> Check {
    let mut runner = TestRunner::new(Config { cases: 128, failure_persistence: None, ..Config::default() });
    runner
        .run(&prop::collection::vec(arb_event(), 0..40), |events| {
            let back = parse_trace_json(&trace_json(&events)).unwrap();
            prop_assert_eq!(sorted_multiset(&back), sorted_multiset(&events));
            let aggs = aggregate_ops(&events, usize::MAX);
            let total: u64 = events.iter().map(|e| e.dur_us).sum();
            prop_assert_eq!(aggs.iter().map(|a| a.total_dur_us).sum::<u64>(), total);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let events = vec![
        TraceEvent {
            name: "decode_step".into(),
            category: "step".into(),
            ts_us: 1500,
            dur_us: 250,
            track: Track::device(0),
            args: None,
        },
        TraceEvent {
            name: "prefill".into(),
            category: "step".into(),
            ts_us: 0,
            dur_us: 1200,
            track: Track::device(0),
            args: Some(BTreeMap::from([("tokens".to_string(), Value::from(512))])),
        },
        TraceEvent {
            name: "ttft_run".into(),
            category: "run".into(),
            ts_us: 0,
            dur_us: 1300,
            track: Track::HOST,
            args: None,
        },
    ];
    let want: Value = serde_json::from_str(&std::fs::read_to_string(fixture("three_spans.trace.json")).unwrap()).unwrap();
    let got: Value = serde_json::from_str(&trace_json(&events)).unwrap();
    ensure(got == want, format!("3-event document differs:\n{got:#}"))?;
    Ok("128 round-trip cases; 3-event fixture key-for-key".into())
}

fn cli_report(dir: &Path, tag: &str) -> Result<Value, String> {
    let report = dir.join(format!("{tag}.json"));
    let out = Command::new(env!("CARGO_BIN_EXE_elana"))
        .args(["all", "--arch"])
        .arg(fixture("llama-3.1-8b.config.json"))
        .arg("--inventory")
        .arg(fixture("llama-3.1-8b.inventory.json"))
        .arg(format!("--backend=simulated:{}", fixture("sim.json").display()))
        .args(["--batch-size", "2", "--prompt-len", "64", "--gen-len", "16", "--runs", "8", "--runs-ttlt", "4"])
        .args(["--seed", "11", "--energy", "--power-source", "mock-const:120", "--power-source", "mock-const:30"])
        .args(["--raw-samples", "--output", "json", "--report"])
        .arg(&report)
        .arg("--trace")
        .arg(dir.join("run.trace.json"))
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.code() == Some(0), format!("exit {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr)))?;
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).map_err(|e| e.to_string())?;
    doc.as_object_mut().unwrap().remove("created_at");
    Ok(doc)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let a = cli_report(dir.path(), "a")?;
    let b = cli_report(dir.path(), "b")?;
    ensure(a == b, "reports differ")?;
    for key in ["sizes", "latencies", "energy"] {
        ensure(!a[key].is_null(), format!("report has no {key}"))?;
    }
    let samples = a["latencies"]["TPOT"]["samples"].as_array().map(Vec::len).unwrap_or(0);
    ensure(samples == 8 * 15, format!("{samples} raw TPOT samples"))?;
    Ok(format!("{} top-level fields identical", a.as_object().unwrap().len()))
}

fn non_reproducibility() -> Check {
    match std::env::var("ELANA_HUB_MODEL") {
        Ok(model) => {
            let mut b = elana::backend::HubBackend::spawn(&model).map_err(|e| e.to_string())?;
            let w = Workload { batch: 1, prompt_len: 16, gen_len: 4, runs: 1, warmup: 1, ..Workload::default() };
            let s = measure_ttft(&mut b, &w, &Probes::default()).map_err(|e| e.to_string())?;
            Ok(format!("hardware tables not targeted; hub smoke TTFT {:.2} ms on {model}", s.mean_ms))
        }
        Err(_) => Ok("hardware tables not targeted; hub smoke skipped (ELANA_HUB_MODEL unset)".into()),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("cache-size fixtures", cache_fixtures),
        ("parameter-size fixtures", param_fixtures),
        ("latency harness correctness", harness_correctness),
        ("energy integration", energy_integration),
        ("reported-number cross-checks", reported_number_checks),
        ("trace export", trace_export),
        ("determinism", determinism),
        ("hardware-bound tables", non_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: {name} ... PASS ({detail}; {secs:.2} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: {name} ... FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
