//! Timed TTFT / TPOT / TTLT harnesses.
//!
//! Token 1 comes from prefill and tokens 2..=T_g from decode steps, so a request of `T_g`
//! generated tokens has `T_g - 1` decode intervals and `TTLT ~= TTFT + (T_g - 1) * TPOT`.

mod harness;
mod stats;

use serde::{Deserialize, Serialize};

pub use harness::{measure_tpot, measure_ttft, measure_ttlt, RunSplit, TtltDecomposition};
pub use stats::{percentile, summarize, LatencyStats, Metric, PhaseWindow, TimingSample};

use crate::error::{Error, Result};
use crate::trace::SpanRecorder;

pub const DEFAULT_RUNS: u32 = 100;
pub const DEFAULT_TTLT_RUNS: u32 = 20;
pub const DEFAULT_WARMUP: u32 = 3;

/// One profiling scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub batch: usize,
    /// Prompt tokens per sequence (T_p).
    pub prompt_len: usize,
    /// Generated tokens per sequence (T_g), including the one produced by prefill.
    pub gen_len: usize,
    pub n_devices: u32,
    pub runs: u32,
    pub warmup: u32,
    pub seed: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            batch: 1,
            prompt_len: 512,
            gen_len: 512,
            n_devices: 1,
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
        }
    }
}

impl Workload {
    pub fn validate_for(&self, metric: Metric) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.prompt_len == 0 {
            return bad("prompt length must be at least 1".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.n_devices == 0 {
            return bad("n_devices must be at least 1".into());
        }
        match metric {
            Metric::Tpot if self.gen_len < 2 => {
                bad(format!("TPOT needs gen_len >= 2 to have an inter-token interval (got {})", self.gen_len))
            }
            Metric::Ttlt if self.gen_len < 1 => bad("TTLT needs gen_len >= 1".into()),
            _ => Ok(()),
        }
    }
}

/// Receives the edges of each timed phase, e.g. to mark power-sampling windows.
pub trait PhaseListener {
    fn phase_start(&self, metric: Metric, t_ns: u64);
    fn phase_end(&self, metric: Metric, t_ns: u64);
}

/// Optional observers attached to a harness run.
#[derive(Clone, Copy, Default)]
pub struct Probes<'a> {
    pub phases: Option<&'a dyn PhaseListener>,
    pub spans: Option<&'a SpanRecorder>,
}
