use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Workload;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "TTFT")]
    Ttft,
    #[serde(rename = "TPOT")]
    Tpot,
    #[serde(rename = "TTLT")]
    Ttlt,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ttft, Metric::Tpot, Metric::Ttlt];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Ttft => "TTFT",
            Metric::Tpot => "TPOT",
            Metric::Ttlt => "TTLT",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TTFT" => Ok(Metric::Ttft),
            "TPOT" => Ok(Metric::Tpot),
            "TTLT" => Ok(Metric::Ttlt),
            _ => Err(format!("unknown metric `{s}` (expected ttft, tpot or ttlt)")),
        }
    }
}

/// Monotonic-clock interval in nanoseconds, `start <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl PhaseWindow {
    pub fn new(start_ns: u64, end_ns: u64) -> Self {
        debug_assert!(start_ns <= end_ns);
        Self { start_ns, end_ns }
    }

    pub fn contains(&self, t_ns: u64) -> bool {
        self.start_ns <= t_ns && t_ns <= self.end_ns
    }

    pub fn encloses(&self, other: &PhaseWindow) -> bool {
        self.start_ns <= other.start_ns && other.end_ns <= self.end_ns
    }

    pub fn duration_s(&self) -> f64 {
        (self.end_ns - self.start_ns) as f64 / 1e9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingSample {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl TimingSample {
    pub fn new(start_ns: u64, end_ns: u64) -> Self {
        assert!(end_ns >= start_ns, "timing sample ends before it starts");
        Self { start_ns, end_ns }
    }

    pub fn duration_ms(&self) -> f64 {
        (self.end_ns - self.start_ns) as f64 / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub metric: Metric,
    /// Raw per-sample durations; dropped from reports unless raw samples were requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<f64>,
    pub count: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub runs: u32,
    pub warmup: u32,
    pub window: PhaseWindow,
    /// Harness notes such as `decode-graph-fallback`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Linear-interpolation percentile of ascending `sorted` data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let q = q.clamp(0.0, 1.0);
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    let v = sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
    // interpolation can round a hair outside the bracketing pair
    v.clamp(sorted[lo], sorted[hi])
}

/// Mean, population standard deviation and interpolated percentiles of `samples`.
pub fn summarize(samples: Vec<f64>, metric: Metric, w: &Workload) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::Measurement(format!("no {metric} samples were recorded")));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Measurement(format!("non-finite {metric} sample")));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let mean = (sorted.iter().sum::<f64>() / n).clamp(min, max);
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(LatencyStats {
        metric,
        count: samples.len(),
        samples,
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: min,
        max_ms: max,
        p50_ms: percentile(&sorted, 0.50),
        p90_ms: percentile(&sorted, 0.90),
        p99_ms: percentile(&sorted, 0.99),
        runs: w.runs,
        warmup: w.warmup,
        window: PhaseWindow::default(),
        flags: vec![],
    })
}
