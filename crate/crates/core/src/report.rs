//! Run reports: JSON document, text tables and the append-only run log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::energy::EnergyMetrics;
use crate::error::{Error, Result};
use crate::latency::{LatencyStats, Metric, TtltDecomposition, Workload};
use crate::sizing::{ByteSize, CacheBreakdown, UnitMode};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub device_names: Vec<String>,
    pub device_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// Absent when no parameter inventory was available.
    pub param_bytes: Option<ByteSize>,
    pub buffer_bytes: Option<ByteSize>,
    pub cache: CacheBreakdown,
    pub unit_mode: UnitMode,
    /// Shape the cache was sized for.
    pub batch: u64,
    pub seq_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub created_at: DateTime<Utc>,
    pub model_id: String,
    pub backend_desc: String,
    pub hardware: HardwareInfo,
    pub workload: Workload,
    pub sizes: Option<SizeReport>,
    pub latencies: Option<BTreeMap<Metric, LatencyStats>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttlt_decomposition: Option<TtltDecomposition>,
    pub energy: Option<EnergyMetrics>,
    pub trace_path: Option<String>,
    pub flags: Vec<String>,
}

impl RunReport {
    pub fn new(model_id: String, backend_desc: String, workload: Workload) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            created_at: Utc::now(),
            model_id,
            backend_desc,
            hardware: HardwareInfo::default(),
            workload,
            sizes: None,
            latencies: None,
            ttlt_decomposition: None,
            energy: None,
            trace_path: None,
            flags: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_none() && self.latencies.is_none() && self.energy.is_none() {
            return Err(Error::Validation("report has no sizes, latencies or energy".into()));
        }
        Ok(())
    }

    pub fn add_flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    /// Drops raw per-run samples so only summaries are emitted.
    pub fn strip_raw_samples(&mut self) {
        if let Some(lat) = &mut self.latencies {
            for s in lat.values_mut() {
                s.samples.clear();
            }
        }
        if let Some(d) = &mut self.ttlt_decomposition {
            d.per_run.clear();
        }
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn grid(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String], right: bool| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| if right { format!("{c:>w$}") } else { format!("{c:<w$}") })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    out.push_str(&line(header, true));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in rows {
        out.push_str(&line(row, true));
    }
}

/// Human-readable tables. A pure function of the report.
pub fn render_table(report: &RunReport) -> String {
    let mut out = String::new();
    let w = &report.workload;
    let _ = writeln!(out, "model: {}  backend: {}", report.model_id, report.backend_desc);
    let _ = writeln!(
        out,
        "workload: batch {}, prompt {}, gen {}, devices {}",
        w.batch, w.prompt_len, w.gen_len, w.n_devices
    );

    if let Some(s) = &report.sizes {
        let unit = s.unit_mode;
        let opt = |b: Option<ByteSize>| b.map(|b| b.format(unit)).unwrap_or_else(|| "n/a".into());
        let mut rows = vec![
            vec!["Param".to_string(), opt(s.param_bytes)],
            vec!["Buffer".to_string(), opt(s.buffer_bytes)],
            vec![format!("Cache (b={}, L={})", s.batch, s.seq_len), s.cache.total_bytes.format(unit)],
        ];
        if s.cache.ssm_bytes.0 > 0 {
            rows.push(vec!["  KV".into(), s.cache.attention_bytes.format(unit)]);
            rows.push(vec!["  SSM state".into(), s.cache.ssm_bytes.format(unit)]);
        }
        out.push('\n');
        let width = rows.iter().map(|r| r[0].len()).max().unwrap_or(0);
        for r in rows {
            let _ = writeln!(out, "{:<width$}  {:>10}", r[0], r[1]);
        }
    }

    if report.latencies.is_some() || report.energy.is_some() {
        let lat = report.latencies.as_ref();
        let energy = report.energy.as_ref();
        let mut header = vec![];
        let mut row = vec![];
        let columns = [
            (Metric::Ttft, "TTFT (ms)", "J/Prompt", energy.and_then(|e| e.j_per_prompt)),
            (Metric::Tpot, "TPOT (ms)", "J/Token", energy.and_then(|e| e.j_per_token)),
            (Metric::Ttlt, "TTLT (ms)", "J/Request", energy.and_then(|e| e.j_per_request)),
        ];
        for (metric, lat_label, j_label, joules) in columns {
            if let Some(s) = lat.and_then(|l| l.get(&metric)) {
                header.push(lat_label.to_string());
                row.push(fmt2(s.mean_ms));
            }
            if let Some(j) = joules {
                header.push(j_label.to_string());
                row.push(fmt2(j));
            }
        }
        if !header.is_empty() {
            out.push('\n');
            grid(&mut out, &header, &[row]);
        }

        if let Some(lat) = lat {
            out.push('\n');
            let header: Vec<String> = ["metric", "runs", "mean", "std", "p50", "p90", "p99", "min", "max"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rows: Vec<Vec<String>> = lat
                .values()
                .map(|s| {
                    let mut r = vec![s.metric.label().to_string(), s.count.to_string()];
                    r.extend([s.mean_ms, s.std_ms, s.p50_ms, s.p90_ms, s.p99_ms, s.min_ms, s.max_ms].map(fmt2));
                    r
                })
                .collect();
            grid(&mut out, &header, &rows);
        }
        if let Some(e) = energy {
            for (metric, p) in &e.phases {
                let _ = writeln!(out, "{} mean power: {} W", metric.label(), fmt2(p.total_power_w));
            }
        }
        if lat.is_some() {
            out.push_str("note: TTFT ends when token ids are available; decode feeds back generated tokens\n");
        }
        if energy.is_some() {
            out.push_str("note: power is raw phase mean, no idle baseline subtracted\n");
        }
    }

    if let Some(d) = &report.ttlt_decomposition {
        let _ = writeln!(
            out,
            "TTLT split: prefill {} ms + decode {} ms",
            fmt2(d.ttft_portion_ms),
            fmt2(d.decode_portion_ms)
        );
    }
    if let Some(p) = &report.trace_path {
        let _ = writeln!(out, "trace: {p}");
    }
    if !report.flags.is_empty() {
        out.push('\n');
        for f in &report.flags {
            let _ = writeln!(out, "* {f}");
        }
    }
    out
}

pub fn emit_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn parse_report(text: &str) -> Result<RunReport> {
    Ok(serde_json::from_str(text)?)
}

/// Appends the report as a single JSON line, creating the file if needed.
pub fn append_run_log(report: &RunReport, path: &Path) -> Result<()> {
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_report).collect()
}
