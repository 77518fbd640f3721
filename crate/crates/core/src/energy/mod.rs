//! Concurrent device power sampling and per-phase energy.
//!
//! Energy for a phase is the sum over devices of the mean sampled power inside the phase
//! window, multiplied by the phase's mean latency: J/Prompt from TTFT, J/Token from TPOT and
//! J/Request from TTLT. No idle baseline is subtracted.

mod nvml;
mod sampler;
mod sources;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use nvml::driver_version as nvml_driver_version;
pub use sampler::{start_sampler, stop_sampler, SamplerHandle, DEFAULT_INTERVAL_S};
pub use sources::{discover_soc_rails, interpolate, open_reader, select_rail, PowerReader, PowerSourceDesc, SocRail};

use crate::error::{Error, Result};
use crate::latency::{LatencyStats, Metric, PhaseWindow};

pub const POWER_WINDOW_FALLBACK: &str = "power-window-fallback";
pub const POWER_SAMPLE_GAP: &str = "power-sample-gap";
pub const POWER_READ_ERRORS: &str = "power-read-errors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t_ns: u64,
    pub device_id: String,
    pub watts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMark {
    pub metric: Metric,
    pub window: PhaseWindow,
}

/// Everything a sampler recorded, immutable once returned by [`stop_sampler`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub interval_s: f64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub devices: Vec<String>,
    #[serde(default)]
    pub device_names: BTreeMap<String, String>,
    pub samples: Vec<PowerSample>,
    pub phases: Vec<PhaseMark>,
    #[serde(default)]
    pub read_errors: Vec<String>,
}

impl PowerTrace {
    pub fn phase(&self, metric: Metric) -> Option<PhaseWindow> {
        self.phases.iter().rev().find(|p| p.metric == metric).map(|p| p.window)
    }

    pub fn device_samples<'a>(&'a self, device: &'a str) -> impl Iterator<Item = &'a PowerSample> + 'a {
        self.samples.iter().filter(move |s| s.device_id == device)
    }

    /// Consecutive same-device samples spaced outside `[0.5, 3] x interval`.
    pub fn gaps(&self) -> Vec<(String, u64, f64)> {
        let interval = self.interval_s;
        let mut out = vec![];
        for dev in &self.devices {
            let ts: Vec<u64> = self.device_samples(dev).map(|s| s.t_ns).collect();
            for w in ts.windows(2) {
                let gap = (w[1] - w[0]) as f64 / 1e9;
                if gap < 0.5 * interval || gap > 3.0 * interval {
                    out.push((dev.clone(), w[0], gap));
                }
            }
        }
        out
    }
}

/// Mean power per device over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPower {
    pub per_device: BTreeMap<String, f64>,
    /// Set when some device had fewer than two samples in the window.
    pub fallback: bool,
}

impl WindowPower {
    pub fn total(&self) -> f64 {
        self.per_device.values().sum()
    }
}

fn mean_in(trace: &PowerTrace, device: &str, window: PhaseWindow) -> (usize, f64) {
    let (n, sum) = trace
        .device_samples(device)
        .filter(|s| window.contains(s.t_ns))
        .fold((0usize, 0.0), |(n, sum), s| (n + 1, sum + s.watts));
    (n, if n > 0 { sum / n as f64 } else { 0.0 })
}

/// Arithmetic mean of each device's samples with `t` in the closed window.
///
/// A device with fewer than two samples falls back to the enclosing phase window (or its single
/// sample) and the result is flagged; no samples at all is an error.
pub fn mean_power(trace: &PowerTrace, window: PhaseWindow, devices: &[String]) -> Result<WindowPower> {
    if window.start_ns > window.end_ns {
        return Err(Error::Validation("power window ends before it starts".into()));
    }
    let enclosing = trace
        .phases
        .iter()
        .map(|p| p.window)
        .filter(|p| p.encloses(&window) && *p != window)
        .min_by_key(|p| p.end_ns - p.start_ns);

    let mut per_device = BTreeMap::new();
    let mut fallback = false;
    for dev in devices {
        if !trace.devices.contains(dev) {
            return Err(Error::Measurement(format!("device `{dev}` is not in the power trace")));
        }
        let (n, mean) = mean_in(trace, dev, window);
        let watts = if n >= 2 {
            mean
        } else {
            fallback = true;
            match enclosing.map(|p| mean_in(trace, dev, p)) {
                Some((m, phase_mean)) if m > 0 => phase_mean,
                _ if n == 1 => mean,
                _ => {
                    return Err(Error::Measurement(format!(
                        "no power samples for `{dev}` in a {:.3} s window; lengthen the phase or shorten --power-interval",
                        window.duration_s()
                    )))
                }
            }
        };
        per_device.insert(dev.clone(), watts);
    }
    Ok(WindowPower { per_device, fallback })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEnergy {
    pub window: PhaseWindow,
    pub mean_power_w: BTreeMap<String, f64>,
    /// Sum of the per-device means.
    pub total_power_w: f64,
    pub mean_latency_ms: f64,
    pub joules: f64,
    #[serde(default)]
    pub power_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyMetrics {
    pub j_per_prompt: Option<f64>,
    pub j_per_token: Option<f64>,
    pub j_per_request: Option<f64>,
    pub phases: BTreeMap<Metric, PhaseEnergy>,
    pub interval_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Combines each latency phase's mean power (summed over devices) with its mean latency.
pub fn energy_metrics(latencies: &BTreeMap<Metric, LatencyStats>, trace: &PowerTrace) -> Result<EnergyMetrics> {
    let mut phases = BTreeMap::new();
    let mut flags = vec![];
    for (&metric, stats) in latencies {
        let window = trace.phase(metric).ok_or_else(|| {
            Error::Config(format!("power trace has no {metric} phase marker"))
        })?;
        let power = mean_power(trace, window, &trace.devices)?;
        if power.fallback && !flags.iter().any(|f| f == POWER_WINDOW_FALLBACK) {
            flags.push(POWER_WINDOW_FALLBACK.to_string());
        }
        let total = power.total();
        phases.insert(
            metric,
            PhaseEnergy {
                window,
                total_power_w: total,
                mean_latency_ms: stats.mean_ms,
                joules: total * stats.mean_ms / 1e3,
                power_fallback: power.fallback,
                mean_power_w: power.per_device,
            },
        );
    }
    if !trace.gaps().is_empty() {
        flags.push(POWER_SAMPLE_GAP.into());
    }
    if !trace.read_errors.is_empty() {
        flags.push(POWER_READ_ERRORS.into());
    }
    let joules = |m: Metric| phases.get(&m).map(|p: &PhaseEnergy| p.joules);
    Ok(EnergyMetrics {
        j_per_prompt: joules(Metric::Ttft),
        j_per_token: joules(Metric::Tpot),
        j_per_request: joules(Metric::Ttlt),
        interval_s: trace.interval_s,
        phases,
        flags,
    })
}

/// Appends one `{t_ns, device_id, watts}` JSON line per sample.
pub fn write_power_log(trace: &PowerTrace, path: &Path) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &trace.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_power_log(path: &Path) -> Result<Vec<PowerSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![];
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
