use serde::{Deserialize, Serialize};

use super::{summarize, LatencyStats, Metric, PhaseWindow, Probes, Workload};
use crate::backend::{derive_seed, generate_random_prompts, Backend, TokenBatch};
use crate::error::{Error, Result};
use crate::trace::Track;

const SEED_TTFT: u64 = 1;
const SEED_TTFT_WARMUP: u64 = 2;
const SEED_TPOT: u64 = 3;
const SEED_TTLT: u64 = 4;
const SEED_TTLT_WARMUP: u64 = 5;

pub const DECODE_GRAPH_FALLBACK: &str = "decode-graph-fallback";

/// Per-run split of one TTLT window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSplit {
    pub total_ms: f64,
    pub ttft_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtltDecomposition {
    /// Mean prefill share of the TTLT window.
    pub ttft_portion_ms: f64,
    /// Mean share spent in the `T_g - 1` decode steps.
    pub decode_portion_ms: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_run: Vec<RunSplit>,
}

struct Phase<'a> {
    metric: Metric,
    probes: &'a Probes<'a>,
    start: Option<u64>,
    end: u64,
}

impl<'a> Phase<'a> {
    fn new(metric: Metric, probes: &'a Probes<'a>) -> Self {
        Self {
            metric,
            probes,
            start: None,
            end: 0,
        }
    }

    fn run_started(&mut self, t_ns: u64) {
        if self.start.is_none() {
            self.start = Some(t_ns);
            if let Some(l) = self.probes.phases {
                l.phase_start(self.metric, t_ns);
            }
        }
    }

    fn run_ended(&mut self, name: &str, start_ns: u64, end_ns: u64, run: usize) {
        self.end = end_ns;
        if let Some(rec) = self.probes.spans {
            let args = [("run".to_string(), serde_json::Value::from(run))].into();
            rec.record_span_ns(name, "run", start_ns, end_ns - start_ns, Track::HOST, Some(args));
        }
    }

    fn finish(self) -> PhaseWindow {
        let start = self.start.unwrap_or(self.end);
        if let Some(l) = self.probes.phases {
            l.phase_end(self.metric, self.end);
        }
        if let Some(rec) = self.probes.spans {
            rec.record_span_ns(self.metric.label(), "phase", start, self.end - start, Track::HOST, None);
        }
        PhaseWindow::new(start, self.end)
    }
}

fn prompts(backend: &dyn Backend, w: &Workload, stream: u64, index: u64) -> Result<TokenBatch> {
    generate_random_prompts(
        backend.caps().vocab_size,
        w.batch,
        w.prompt_len,
        derive_seed(w.seed, stream, index),
    )
}

/// Prepares the decode fast path, returning whether the harness fell back to plain decode.
fn prepare_or_fallback(backend: &mut dyn Backend, w: &Workload) -> Result<bool> {
    match backend.prepare_decode(w) {
        Ok(()) => Ok(false),
        Err(Error::Capability(_)) => Ok(true),
        Err(e) => Err(e),
    }
}

/// Time-to-first-token: `runs` timed prefills on fresh random prompts after `warmup` untimed
/// ones. Each window is fenced by `synchronize` on both edges. Never prepares decode graphs.
pub fn measure_ttft(backend: &mut dyn Backend, w: &Workload, probes: &Probes) -> Result<LatencyStats> {
    w.validate_for(Metric::Ttft)?;
    let clock = backend.clock();
    for i in 0..w.warmup as usize {
        let p = prompts(backend, w, SEED_TTFT_WARMUP, i as u64)?;
        backend.prefill(&p).map_err(|e| e.at_run(i))?;
        backend.synchronize().map_err(|e| e.at_run(i))?;
    }

    let mut phase = Phase::new(Metric::Ttft, probes);
    let mut samples = Vec::with_capacity(w.runs as usize);
    for run in 0..w.runs as usize {
        let p = prompts(backend, w, SEED_TTFT, run as u64)?;
        let timed = |backend: &mut dyn Backend, phase: &mut Phase| -> Result<(u64, u64)> {
            backend.synchronize()?;
            let t0 = clock.now_ns();
            phase.run_started(t0);
            backend.prefill(&p)?;
            backend.synchronize()?;
            Ok((t0, clock.now_ns()))
        };
        let (t0, t1) = timed(backend, &mut phase).map_err(|e| e.at_run(run))?;
        phase.run_ended("ttft_run", t0, t1, run);
        samples.push((t1 - t0) as f64 / 1e6);
    }

    let mut stats = summarize(samples, Metric::Ttft, w)?;
    stats.window = phase.finish();
    Ok(stats)
}

/// Time-per-output-token: per run, an untimed prefill, `warmup` untimed decode steps and then
/// `T_g - 1` timed steps. Each interval runs between consecutive post-step fences and covers the
/// whole batch.
pub fn measure_tpot(backend: &mut dyn Backend, w: &Workload, probes: &Probes) -> Result<LatencyStats> {
    w.validate_for(Metric::Tpot)?;
    let clock = backend.clock();
    let fallback = prepare_or_fallback(backend, w)?;

    let steps = w.gen_len - 1;
    let mut phase = Phase::new(Metric::Tpot, probes);
    let mut samples = Vec::with_capacity(w.runs as usize * steps);
    for run in 0..w.runs as usize {
        let p = prompts(backend, w, SEED_TPOT, run as u64)?;
        let mut one_run = |backend: &mut dyn Backend| -> Result<()> {
            let (mut state, _) = backend.prefill(&p)?;
            for _ in 0..w.warmup {
                backend.decode_step(&mut state)?;
            }
            backend.synchronize()?;
            let t_start = clock.now_ns();
            phase.run_started(t_start);
            let mut prev = t_start;
            for _ in 0..steps {
                backend.decode_step(&mut state)?;
                backend.synchronize()?;
                let t = clock.now_ns();
                samples.push((t - prev) as f64 / 1e6);
                prev = t;
            }
            phase.run_ended("tpot_run", t_start, prev, run);
            Ok(())
        };
        one_run(backend).map_err(|e| e.at_run(run))?;
    }

    let mut stats = summarize(samples, Metric::Tpot, w)?;
    stats.window = phase.finish();
    if fallback {
        stats.flags.push(DECODE_GRAPH_FALLBACK.into());
    }
    Ok(stats)
}

/// Time-to-last-token: per run, one contiguous window over prefill and `T_g - 1` decode steps,
/// with a fence after prefill to split it into TTFT and decode portions.
///
/// The decode fast path is prepared once before any run; prefill never uses it.
pub fn measure_ttlt(
    backend: &mut dyn Backend,
    w: &Workload,
    probes: &Probes,
) -> Result<(LatencyStats, TtltDecomposition)> {
    w.validate_for(Metric::Ttlt)?;
    let clock = backend.clock();
    let fallback = prepare_or_fallback(backend, w)?;
    let steps = w.gen_len - 1;

    for i in 0..w.warmup as usize {
        let warm = |backend: &mut dyn Backend| -> Result<()> {
            let p = prompts(backend, w, SEED_TTLT_WARMUP, i as u64)?;
            let (mut state, _) = backend.prefill(&p)?;
            if steps > 0 {
                backend.decode_step(&mut state)?;
            }
            backend.synchronize()
        };
        warm(backend).map_err(|e| e.at_run(i))?;
    }

    let mut phase = Phase::new(Metric::Ttlt, probes);
    let mut splits = Vec::with_capacity(w.runs as usize);
    for run in 0..w.runs as usize {
        let p = prompts(backend, w, SEED_TTLT, run as u64)?;
        let mut one_run = |backend: &mut dyn Backend| -> Result<(u64, u64, u64)> {
            backend.synchronize()?;
            let t0 = clock.now_ns();
            phase.run_started(t0);
            let (mut state, _) = backend.prefill(&p)?;
            backend.synchronize()?;
            let t1 = clock.now_ns();
            for _ in 0..steps {
                backend.decode_step(&mut state)?;
            }
            backend.synchronize()?;
            Ok((t0, t1, clock.now_ns()))
        };
        let (t0, t1, t2) = one_run(backend).map_err(|e| e.at_run(run))?;
        phase.run_ended("ttlt_run", t0, t2, run);
        splits.push(RunSplit {
            total_ms: (t2 - t0) as f64 / 1e6,
            ttft_ms: (t1 - t0) as f64 / 1e6,
            decode_ms: (t2 - t1) as f64 / 1e6,
        });
    }

    let n = splits.len() as f64;
    let decomposition = TtltDecomposition {
        ttft_portion_ms: splits.iter().map(|s| s.ttft_ms).sum::<f64>() / n,
        decode_portion_ms: splits.iter().map(|s| s.decode_ms).sum::<f64>() / n,
        per_run: splits.clone(),
    };
    let mut stats = summarize(splits.iter().map(|s| s.total_ms).collect(), Metric::Ttlt, w)?;
    stats.window = phase.finish();
    if fallback {
        stats.flags.push(DECODE_GRAPH_FALLBACK.into());
    }
    Ok((stats, decomposition))
}
