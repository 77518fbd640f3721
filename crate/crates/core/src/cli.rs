//! Command-line front end: flag parsing into a [`RunPlan`] and phase orchestration.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{open_backend, Backend, BackendSpec};
use crate::energy::{
    energy_metrics, nvml_driver_version, start_sampler, stop_sampler, write_power_log, PowerSourceDesc, SamplerHandle,
    DEFAULT_INTERVAL_S,
};
use crate::error::{Error, Result};
use crate::latency::{
    measure_tpot, measure_ttft, measure_ttlt, Metric, PhaseListener, Probes, Workload, DEFAULT_RUNS,
    DEFAULT_TTLT_RUNS, DEFAULT_WARMUP,
};
use crate::report::{append_run_log, emit_json, render_table, HardwareInfo, RunReport, SizeReport, TOOL_VERSION};
use crate::sizing::{cache_size, param_and_buffer_size, parse_arch, ParamInventory, UnitMode};
use crate::trace::{aggregate_ops, export_trace_json, SpanRecorder};

#[derive(Parser, Debug)]
#[command(name = "elana", version = TOOL_VERSION, about = "Model size, latency and energy profiler for LLM inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter, buffer and cache sizes from an architecture config.
    Size(ProfileArgs),
    /// TTFT, TPOT and TTLT (and optionally energy) against a backend.
    Latency(ProfileArgs),
    /// Sizes followed by latency and energy.
    All(ProfileArgs),
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Architecture config (model-hub style config.json).
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Parameter inventory JSON: a list of {name, element_count, dtype_bytes, is_buffer}.
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Safetensors weight files to count parameters from (repeatable).
    #[arg(long = "weights")]
    weights: Vec<PathBuf>,
    /// simulated:<config.json> or hub:<model>.
    #[arg(long)]
    backend: Option<String>,

    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 512)]
    prompt_len: usize,
    /// Generated tokens per request, including the first [default: 0 for size, 512 otherwise]
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    n_devices: u32,
    /// Timed runs for TTFT and TPOT.
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: u32,
    #[arg(long, default_value_t = DEFAULT_TTLT_RUNS)]
    runs_ttlt: u32,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of ttft,tpot,ttlt.
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    metrics: Vec<Metric>,

    /// Sample device power during the latency phases.
    #[arg(long)]
    energy: bool,
    /// Seconds between power samples.
    #[arg(long, default_value_t = DEFAULT_INTERVAL_S)]
    power_interval: f64,
    /// mock-const:<W>, mock-script:<path>, gpu:<index>, soc[:<rail>] (repeatable).
    #[arg(long = "power-source")]
    power_sources: Vec<String>,
    /// Append raw power samples as JSON lines.
    #[arg(long)]
    power_log: Option<PathBuf>,

    /// Write a Trace Event Format file of the latency runs.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Units::Si)]
    units: Units,
    #[arg(long, value_enum, default_value_t = OutputMode::Table)]
    output: OutputMode,
    /// Write the JSON report to a file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Append the JSON report as one line to a log.
    #[arg(long)]
    run_log: Option<PathBuf>,
    /// Keep per-run samples in the JSON report.
    #[arg(long)]
    raw_samples: bool,
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Units {
    Si,
    Gib,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputMode {
    #[default]
    Table,
    Json,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    Size,
    Latency,
    All,
}

impl PlanKind {
    fn sizes(self) -> bool {
        matches!(self, PlanKind::Size | PlanKind::All)
    }

    fn latency(self) -> bool {
        matches!(self, PlanKind::Latency | PlanKind::All)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub subcommand: PlanKind,
    pub backend_spec: Option<BackendSpec>,
    pub arch_path: Option<PathBuf>,
    pub inventory_path: Option<PathBuf>,
    pub weight_paths: Vec<PathBuf>,
    pub workload: Workload,
    pub ttlt_runs: u32,
    /// Always in TTFT, TPOT, TTLT order.
    pub metrics: Vec<Metric>,
    pub energy_enabled: bool,
    pub power_sources: Vec<PowerSourceDesc>,
    pub power_interval_s: f64,
    pub power_log: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    pub unit_mode: UnitMode,
    pub output: OutputMode,
    pub report_path: Option<PathBuf>,
    pub run_log: Option<PathBuf>,
    pub raw_samples: bool,
}

/// Why parsing stopped: clap's own outcome (including `--help`/`--version`) or a bad plan.
#[derive(Debug)]
pub enum ParseError {
    Clap(clap::Error),
    Plan(Error),
}

impl ParseError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ParseError::Clap(e) => e.exit_code(),
            ParseError::Plan(e) => e.exit_code(),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseError::Clap(e) => write!(f, "{e}"),
            ParseError::Plan(e) => write!(f, "elana: {e}"),
        }
    }
}

pub fn parse_args<I, T>(argv: I) -> std::result::Result<RunPlan, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(ParseError::Clap)?;
    build_plan(cli).map_err(ParseError::Plan)
}

fn build_plan(cli: Cli) -> Result<RunPlan> {
    let (kind, a) = match cli.command {
        Command::Size(a) => (PlanKind::Size, a),
        Command::Latency(a) => (PlanKind::Latency, a),
        Command::All(a) => (PlanKind::All, a),
    };
    let usage = |m: &str| Err(Error::Usage(m.to_string()));

    if a.batch_size == 0 {
        return usage("--batch-size must be at least 1");
    }
    if a.prompt_len == 0 {
        return usage("--prompt-len must be at least 1");
    }
    if a.n_devices == 0 {
        return usage("--n-devices must be at least 1");
    }
    let gen_len = a.gen_len.unwrap_or(if kind == PlanKind::Size { 0 } else { 512 });

    let backend_spec = a
        .backend
        .as_deref()
        .map(|s| s.parse::<BackendSpec>().map_err(Error::Usage))
        .transpose()?;
    if kind.sizes() && a.arch.is_none() {
        return usage("size profiling needs --arch <config.json>");
    }
    if kind.latency() && backend_spec.is_none() {
        return usage("latency profiling needs --backend simulated:<config> or hub:<model>");
    }

    let mut metrics = if a.metrics.is_empty() { Metric::ALL.to_vec() } else { a.metrics };
    metrics.sort();
    metrics.dedup();
    if kind.latency() {
        if a.runs == 0 || a.runs_ttlt == 0 {
            return usage("--runs and --runs-ttlt must be at least 1");
        }
        if metrics.contains(&Metric::Tpot) && gen_len < 2 {
            return usage("TPOT needs --gen-len of at least 2");
        }
        if metrics.contains(&Metric::Ttlt) && gen_len < 1 {
            return usage("TTLT needs --gen-len of at least 1");
        }
    }

    let power_sources = a
        .power_sources
        .iter()
        .map(|s| PowerSourceDesc::parse(s))
        .collect::<Result<Vec<_>>>()?;
    if a.energy {
        if !kind.latency() {
            return Err(Error::Config("--energy needs the latency or all subcommand".into()));
        }
        if power_sources.is_empty() {
            return Err(Error::Config(
                "--energy needs at least one --power-source (gpu:<index>, soc, mock-const:<W> or mock-script:<path>)".into(),
            ));
        }
        if !(a.power_interval > 0.0 && a.power_interval.is_finite()) {
            return Err(Error::Config("--power-interval must be a positive number of seconds".into()));
        }
    } else if !power_sources.is_empty() || a.power_log.is_some() {
        return Err(Error::Config("--power-source and --power-log need --energy".into()));
    }
    if a.trace.is_some() && !kind.latency() {
        return Err(Error::Config("--trace needs the latency or all subcommand".into()));
    }

    Ok(RunPlan {
        subcommand: kind,
        backend_spec,
        arch_path: a.arch,
        inventory_path: a.inventory,
        weight_paths: a.weights,
        workload: Workload {
            batch: a.batch_size,
            prompt_len: a.prompt_len,
            gen_len,
            n_devices: a.n_devices,
            runs: a.runs,
            warmup: a.warmup,
            seed: a.seed,
        },
        ttlt_runs: a.runs_ttlt,
        metrics,
        energy_enabled: a.energy,
        power_sources,
        power_interval_s: a.power_interval,
        power_log: a.power_log,
        trace_path: a.trace,
        unit_mode: match a.units {
            Units::Si => UnitMode::Si,
            Units::Gib => UnitMode::Binary,
        },
        output: a.output,
        report_path: a.report,
        run_log: a.run_log,
        raw_samples: a.raw_samples,
    })
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_inventory(plan: &RunPlan, backend: Option<&mut Box<dyn Backend>>) -> Result<Option<ParamInventory>> {
    if let Some(path) = &plan.inventory_path {
        return ParamInventory::from_json(&read_json(path)?).map(Some);
    }
    if !plan.weight_paths.is_empty() {
        let mut inv = ParamInventory::new(vec![])?;
        for path in &plan.weight_paths {
            inv.extend(ParamInventory::from_safetensors(path)?)?;
        }
        return Ok(Some(inv));
    }
    match backend.and_then(|b| b.param_inventory()) {
        Some(inv) => inv.map(Some),
        None => Ok(None),
    }
}

fn platform() -> String {
    let model = std::fs::read_to_string("/proc/device-tree/model")
        .ok()
        .map(|m| m.trim_end_matches('\0').trim().to_string())
        .filter(|m| !m.is_empty());
    let base = format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH);
    match model {
        Some(m) => format!("{base} ({m})"),
        None => base,
    }
}

/// Runs the plan and returns the process exit code (0, 1 or 2).
pub fn execute(plan: &RunPlan) -> i32 {
    match run(plan) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("elana: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            e.exit_code()
        }
    }
}

fn run(plan: &RunPlan) -> Result<()> {
    let report = build_report(plan)?;
    deliver(plan, &report)
}

/// Runs all requested phases and assembles the report without writing anything but the
/// trace and power log.
pub fn build_report(plan: &RunPlan) -> Result<RunReport> {
    let arch = match &plan.arch_path {
        Some(p) if plan.subcommand.sizes() => Some(parse_arch(&read_json(p)?)?),
        _ => None,
    };
    let mut backend = match &plan.backend_spec {
        Some(spec) if plan.subcommand.latency() => Some(open_backend(spec)?),
        _ => None,
    };

    let model_id = match (&backend, &arch) {
        (Some(b), _) => b.model_id(),
        (None, Some(a)) => a.model_id.clone(),
        (None, None) => "unknown".into(),
    };
    let backend_desc = backend.as_ref().map(|b| b.describe()).unwrap_or_else(|| "none".into());
    let mut report = RunReport::new(model_id, backend_desc, plan.workload.clone());
    report.hardware = HardwareInfo {
        device_names: backend.as_ref().map(|b| b.caps().device_ids.clone()).unwrap_or_default(),
        device_count: plan.workload.n_devices as usize,
        platform: Some(platform()),
        driver: None,
    };

    if let Some(arch) = &arch {
        let inv = load_inventory(plan, backend.as_mut())?;
        let (param, buffer) = match &inv {
            Some(inv) => {
                let (p, b) = param_and_buffer_size(inv);
                (Some(p), Some(b))
            }
            None => (None, None),
        };
        let w = &plan.workload;
        let seq_len = (w.prompt_len + w.gen_len) as u64;
        report.sizes = Some(SizeReport {
            param_bytes: param,
            buffer_bytes: buffer,
            cache: cache_size(arch, w.batch as u64, seq_len, None)?,
            unit_mode: plan.unit_mode,
            batch: w.batch as u64,
            seq_len,
        });
    }

    if let Some(backend) = backend.as_mut() {
        profile_latency(plan, backend.as_mut(), &mut report)?;
    }

    if !plan.raw_samples {
        report.strip_raw_samples();
    }
    report.validate()?;
    Ok(report)
}

fn profile_latency(plan: &RunPlan, backend: &mut dyn Backend, report: &mut RunReport) -> Result<()> {
    let spans = plan.trace_path.as_ref().map(|_| SpanRecorder::new());
    backend.set_span_recorder(spans.clone());

    let sampler = if plan.energy_enabled {
        Some(start_sampler(&plan.power_sources, plan.power_interval_s, backend.clock())?)
    } else {
        None
    };
    let measured = measure_phases(plan, backend, sampler.as_ref(), spans.as_ref(), report);
    backend.set_span_recorder(None);
    // the sampler is joined before anything is reported, even on failure
    let power = sampler.map(stop_sampler).transpose();
    measured?;
    let power = power?;

    if let Some(power) = power {
        if power.devices.iter().any(|d| d.starts_with("gpu")) {
            report.hardware.driver = nvml_driver_version().map(|v| format!("NVIDIA driver {v}"));
            let names: Vec<String> = power.device_names.values().cloned().collect();
            if !names.is_empty() {
                report.hardware.device_names = names;
            }
        }
        if let Some(path) = &plan.power_log {
            write_power_log(&power, path)?;
        }
        let latencies = report.latencies.clone().unwrap_or_default();
        let energy = energy_metrics(&latencies, &power)?;
        for f in &energy.flags {
            report.add_flag(f);
        }
        report.energy = Some(energy);
    }

    if let (Some(path), Some(spans)) = (&plan.trace_path, spans) {
        export_trace_json(&spans.finish(), path)?;
        report.trace_path = Some(path.display().to_string());
    }
    Ok(())
}

fn measure_phases(
    plan: &RunPlan,
    backend: &mut dyn Backend,
    sampler: Option<&SamplerHandle>,
    spans: Option<&SpanRecorder>,
    report: &mut RunReport,
) -> Result<()> {
    let probes = Probes {
        phases: sampler.map(|s| s as &dyn PhaseListener),
        spans,
    };
    let mut latencies = std::collections::BTreeMap::new();
    for &metric in &plan.metrics {
        let stats = match metric {
            Metric::Ttft => measure_ttft(backend, &plan.workload, &probes)?,
            Metric::Tpot => measure_tpot(backend, &plan.workload, &probes)?,
            Metric::Ttlt => {
                let w = Workload { runs: plan.ttlt_runs, ..plan.workload.clone() };
                let (stats, split) = measure_ttlt(backend, &w, &probes)?;
                report.ttlt_decomposition = Some(split);
                stats
            }
        };
        for f in &stats.flags {
            report.add_flag(f);
        }
        latencies.insert(metric, stats);
    }
    report.latencies = Some(latencies);
    Ok(())
}

fn deliver(plan: &RunPlan, report: &RunReport) -> Result<()> {
    let json = emit_json(report)?;
    if matches!(plan.output, OutputMode::Table | OutputMode::Both) {
        print!("{}", render_table(report));
        if let Some(path) = &plan.trace_path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let events = crate::trace::parse_trace_json(&text)?;
            // kernels if the backend emitted any, otherwise backend steps
            let kernels: Vec<_> = events.iter().filter(|e| e.category == "kernel").cloned().collect();
            let pool = if kernels.is_empty() {
                events.into_iter().filter(|e| e.category == "step").collect()
            } else {
                kernels
            };
            let top = aggregate_ops(&pool, 5);
            if !top.is_empty() {
                println!("\ntop spans by total time:");
                for op in top {
                    println!(
                        "  {:<20} {:>10.2} ms  x{:<6} {:>5.1}%",
                        op.name,
                        op.total_dur_us as f64 / 1e3,
                        op.count,
                        op.share_of_total * 100.0
                    );
                }
            }
        }
    }
    if matches!(plan.output, OutputMode::Json | OutputMode::Both) {
        println!("{json}");
    }
    if let Some(path) = &plan.report_path {
        std::fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &plan.run_log {
        append_run_log(report, path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(args: &str) -> std::result::Result<RunPlan, ParseError> {
        parse_args(std::iter::once("elana").chain(args.split_whitespace()))
    }

    #[test]
    fn size_plan() {
        let p = plan("size --arch cfg.json --batch-size 128 --prompt-len 1024").unwrap();
        assert_eq!(p.subcommand, PlanKind::Size);
        assert_eq!(p.workload.batch, 128);
        assert_eq!(p.workload.prompt_len, 1024);
        assert_eq!(p.workload.gen_len, 0);
        assert_eq!(p.unit_mode, UnitMode::Si);
        assert!(p.backend_spec.is_none());
    }

    #[test]
    fn latency_energy_plan() {
        let p = plan(
            "latency --backend simulated:sim.json --batch-size 1 --prompt-len 512 --gen-len 512 --energy --power-source mock-const:100",
        )
        .unwrap();
        assert_eq!(p.backend_spec, Some(BackendSpec::Simulated("sim.json".into())));
        assert!(p.energy_enabled);
        assert_eq!(p.power_sources, vec![PowerSourceDesc::MockConstant { watts: 100.0 }]);
        assert_eq!(p.metrics, Metric::ALL.to_vec());
        assert_eq!((p.workload.runs, p.ttlt_runs, p.workload.warmup), (100, 20, 3));
        assert_eq!(p.power_interval_s, 0.1);
    }

    #[test]
    fn metrics_are_ordered() {
        let p = plan("latency --backend hub:x --metrics ttlt,TTFT").unwrap();
        assert_eq!(p.metrics, vec![Metric::Ttft, Metric::Ttlt]);
    }

    #[test]
    fn user_errors_exit_2() {
        for args in [
            "latency --backend simulated:s.json --prompt-len 0",
            "latency --backend simulated:s.json --bogus",
            "frobnicate",
            "latency",
            "size",
            "latency --backend simulated:s.json --energy",
            "latency --backend simulated:s.json --power-source mock-const:1",
            "latency --backend nope:s.json",
            "latency --backend simulated:s.json --gen-len 1 --metrics tpot",
            "latency --backend simulated:s.json --units tib",
        ] {
            let err = plan(args).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{args}: {err}");
        }
    }

    #[test]
    fn missing_backend_file_exits_1() {
        let p = plan("latency --backend simulated:/nonexistent/sim.json --output json").unwrap();
        assert_eq!(execute(&p), 1);
    }
}
