use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::nvml::NvmlDeviceHandle;
use crate::error::{Error, Result};

const DEFAULT_SYSFS_ROOT: &str = "/sys/bus/i2c/drivers";

/// Where power readings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PowerSourceDesc {
    /// Board power of a discrete GPU via NVML.
    DiscreteGpu { index: u32 },
    /// An on-board INA3221 rail of an embedded SoC, read from sysfs.
    SocSensor {
        #[serde(default)]
        rail: Option<String>,
        #[serde(default)]
        sysfs_root: Option<PathBuf>,
    },
    MockConstant { watts: f64 },
    /// Piecewise-linear `(seconds since sampler start, watts)` breakpoints, held flat outside.
    MockScripted { breakpoints: Vec<(f64, f64)> },
}

impl PowerSourceDesc {
    /// Parses a `--power-source` value: `mock-const:<watts>`, `mock-script:<path>`,
    /// `gpu:<index>`, `soc` or `soc:<rail-label>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let desc = match (kind, arg) {
            ("mock-const", w) => {
                let watts: f64 = w
                    .parse()
                    .map_err(|_| Error::Usage(format!("mock-const needs a wattage, got `{w}`")))?;
                PowerSourceDesc::MockConstant { watts }
            }
            ("mock-script", path) if !path.is_empty() => {
                let path = Path::new(path);
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let doc: Value = serde_json::from_str(&text)?;
                PowerSourceDesc::MockScripted {
                    breakpoints: parse_breakpoints(&doc)?,
                }
            }
            ("gpu", idx) => PowerSourceDesc::DiscreteGpu {
                index: idx
                    .parse()
                    .map_err(|_| Error::Usage(format!("gpu power source needs an index, got `{idx}`")))?,
            },
            ("soc", rail) => PowerSourceDesc::SocSensor {
                rail: (!rail.is_empty()).then(|| rail.to_string()),
                sysfs_root: None,
            },
            _ => {
                return Err(Error::Usage(format!(
                    "unknown power source `{spec}` (expected mock-const:<W>, mock-script:<path>, gpu:<index> or soc)"
                )))
            }
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PowerSourceDesc::MockConstant { watts } if !watts.is_finite() || *watts < 0.0 => {
                Err(Error::Config(format!("mock power must be finite and non-negative (got {watts})")))
            }
            PowerSourceDesc::MockScripted { breakpoints } => {
                if breakpoints.is_empty() {
                    return Err(Error::Config("power script has no breakpoints".into()));
                }
                if breakpoints.iter().any(|(t, w)| !t.is_finite() || !w.is_finite() || *w < 0.0) {
                    return Err(Error::Config("power script values must be finite, watts non-negative".into()));
                }
                if breakpoints.windows(2).any(|p| p[1].0 < p[0].0) {
                    return Err(Error::Config("power script breakpoints must be sorted by time".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Identifier used for this source's samples; `index` is its position on the command line.
    pub fn device_id(&self, index: usize) -> String {
        match self {
            PowerSourceDesc::DiscreteGpu { index } => format!("gpu{index}"),
            PowerSourceDesc::SocSensor { rail: Some(r), .. } => format!("soc:{r}"),
            PowerSourceDesc::SocSensor { rail: None, .. } => "soc".into(),
            PowerSourceDesc::MockConstant { .. } | PowerSourceDesc::MockScripted { .. } => {
                format!("mock{index}")
            }
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, PowerSourceDesc::MockConstant { .. } | PowerSourceDesc::MockScripted { .. })
    }
}

fn parse_breakpoints(doc: &Value) -> Result<Vec<(f64, f64)>> {
    let list = match doc {
        Value::Object(o) => o.get("breakpoints").ok_or_else(|| Error::Schema {
            field: "breakpoints".into(),
        })?,
        other => other,
    };
    serde_json::from_value(list.clone())
        .map_err(|e| Error::Config(format!("power script must be a list of [seconds, watts] pairs: {e}")))
}

/// Linear interpolation through `(t, watts)` breakpoints, constant beyond the ends.
pub fn interpolate(breakpoints: &[(f64, f64)], t: f64) -> f64 {
    let first = breakpoints[0];
    let last = breakpoints[breakpoints.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let i = breakpoints.partition_point(|&(bt, _)| bt <= t);
    let (t0, w0) = breakpoints[i - 1];
    let (t1, w1) = breakpoints[i];
    if t1 == t0 {
        w1
    } else {
        w0 + (w1 - w0) * (t - t0) / (t1 - t0)
    }
}

pub trait PowerReader: Send {
    fn device_id(&self) -> &str;

    /// Instantaneous power; `t_s` is the time since the sampler started.
    fn read_watts(&mut self, t_s: f64) -> std::result::Result<f64, String>;

    /// Hardware name for reports, when the platform exposes one.
    fn name(&self) -> Option<String> {
        None
    }
}

struct Constant {
    id: String,
    watts: f64,
}

impl PowerReader for Constant {
    fn device_id(&self) -> &str {
        &self.id
    }
    fn read_watts(&mut self, _t_s: f64) -> std::result::Result<f64, String> {
        Ok(self.watts)
    }
}

struct Scripted {
    id: String,
    breakpoints: Vec<(f64, f64)>,
}

impl PowerReader for Scripted {
    fn device_id(&self) -> &str {
        &self.id
    }
    fn read_watts(&mut self, t_s: f64) -> std::result::Result<f64, String> {
        Ok(interpolate(&self.breakpoints, t_s))
    }
}

struct Gpu {
    id: String,
    handle: NvmlDeviceHandle,
}

impl PowerReader for Gpu {
    fn device_id(&self) -> &str {
        &self.id
    }
    fn read_watts(&mut self, _t_s: f64) -> std::result::Result<f64, String> {
        self.handle.power_watts()
    }
    fn name(&self) -> Option<String> {
        self.handle.name()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum RailFiles {
    /// hwmon driver: millivolts and milliamps.
    Hwmon { volts: PathBuf, amps: PathBuf },
    /// Legacy iio driver: milliwatts.
    Iio { power: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocRail {
    pub label: String,
    files: RailFiles,
}

impl SocRail {
    pub fn read_watts(&self) -> std::result::Result<f64, String> {
        let num = |p: &Path| -> std::result::Result<f64, String> {
            let s = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            s.trim().parse::<f64>().map_err(|e| format!("{}: {e}", p.display()))
        };
        match &self.files {
            RailFiles::Hwmon { volts, amps } => Ok(num(volts)? * num(amps)? / 1e6),
            RailFiles::Iio { power } => Ok(num(power)? / 1e3),
        }
    }
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    out
}

fn read_label(p: &Path) -> Option<String> {
    fs::read_to_string(p).ok().map(|s| s.trim().to_string())
}

/// Finds INA3221 power rails under a sysfs driver root (`/sys/bus/i2c/drivers`).
pub fn discover_soc_rails(root: &Path) -> Vec<SocRail> {
    let mut rails = vec![];
    for dev in subdirs(&root.join("ina3221")) {
        for hwmon in subdirs(&dev.join("hwmon")) {
            for ch in 1..=4 {
                if let Some(label) = read_label(&hwmon.join(format!("in{ch}_label"))) {
                    let volts = hwmon.join(format!("in{ch}_input"));
                    let amps = hwmon.join(format!("curr{ch}_input"));
                    if volts.exists() && amps.exists() {
                        rails.push(SocRail { label, files: RailFiles::Hwmon { volts, amps } });
                    }
                }
            }
        }
    }
    for dev in subdirs(&root.join("ina3221x")) {
        for iio in subdirs(&dev).into_iter().filter(|p| {
            p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("iio:device"))
        }) {
            for ch in 0..4 {
                if let Some(label) = read_label(&iio.join(format!("rail_name_{ch}"))) {
                    let power = iio.join(format!("in_power{ch}_input"));
                    if power.exists() {
                        rails.push(SocRail { label, files: RailFiles::Iio { power } });
                    }
                }
            }
        }
    }
    rails
}

/// Picks the requested rail, or the GPU rail, or the module input rail.
pub fn select_rail(rails: &[SocRail], wanted: Option<&str>) -> Option<SocRail> {
    if let Some(w) = wanted {
        return rails.iter().find(|r| r.label.eq_ignore_ascii_case(w)).cloned();
    }
    rails
        .iter()
        .find(|r| r.label.to_ascii_uppercase().contains("GPU"))
        .or_else(|| rails.iter().find(|r| r.label.eq_ignore_ascii_case("VDD_IN")))
        .or_else(|| rails.first())
        .cloned()
}

struct Soc {
    id: String,
    rail: SocRail,
}

impl PowerReader for Soc {
    fn device_id(&self) -> &str {
        &self.id
    }
    fn read_watts(&mut self, _t_s: f64) -> std::result::Result<f64, String> {
        self.rail.read_watts()
    }
    fn name(&self) -> Option<String> {
        Some(format!("SoC rail {}", self.rail.label))
    }
}

/// Opens a reader and takes one probe reading so unreachable devices fail at startup.
pub fn open_reader(desc: &PowerSourceDesc, index: usize) -> Result<Box<dyn PowerReader>> {
    desc.validate()?;
    let id = desc.device_id(index);
    let unavailable = |message: String| Error::Device { device: id.clone(), message };
    let mut reader: Box<dyn PowerReader> = match desc {
        PowerSourceDesc::MockConstant { watts } => Box::new(Constant { id: id.clone(), watts: *watts }),
        PowerSourceDesc::MockScripted { breakpoints } => Box::new(Scripted {
            id: id.clone(),
            breakpoints: breakpoints.clone(),
        }),
        PowerSourceDesc::DiscreteGpu { index } => Box::new(Gpu {
            id: id.clone(),
            handle: NvmlDeviceHandle::open(*index).map_err(unavailable)?,
        }),
        PowerSourceDesc::SocSensor { rail, sysfs_root } => {
            let root = sysfs_root.clone().unwrap_or_else(|| DEFAULT_SYSFS_ROOT.into());
            let rails = discover_soc_rails(&root);
            let rail = select_rail(&rails, rail.as_deref()).ok_or_else(|| {
                unavailable(format!(
                    "no matching INA3221 power rail under {} (found: {})",
                    root.display(),
                    rails.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join(", ")
                ))
            })?;
            Box::new(Soc { id: id.clone(), rail })
        }
    };
    reader.read_watts(0.0).map_err(unavailable)?;
    Ok(reader)
}
