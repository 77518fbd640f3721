use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

const GB: u128 = 1_000_000_000;
const GIB: u128 = 1 << 30;

/// An exact byte count. Unit conversion happens only when formatting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const ZERO: ByteSize = ByteSize(0);

    pub fn bytes(self) -> u64 {
        self.0
    }

    pub fn as_gb(self) -> f64 {
        self.0 as f64 / GB as f64
    }

    pub fn as_gib(self) -> f64 {
        self.0 as f64 / GIB as f64
    }

    pub fn format(self, unit: UnitMode) -> String {
        format_bytes(self, unit, 2)
    }
}

impl From<u64> for ByteSize {
    fn from(bytes: u64) -> Self {
        ByteSize(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitMode {
    /// 1 GB = 1000^3 bytes.
    #[default]
    Si,
    /// 1 GiB = 1024^3 bytes.
    Binary,
}

impl UnitMode {
    fn divisor(self) -> u128 {
        match self {
            UnitMode::Si => GB,
            UnitMode::Binary => GIB,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            UnitMode::Si => "GB",
            UnitMode::Binary => "GiB",
        }
    }
}

impl fmt::Display for UnitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitMode::Si => "si",
            UnitMode::Binary => "gib",
        })
    }
}

impl FromStr for UnitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "si" | "gb" => Ok(UnitMode::Si),
            "gib" | "binary" => Ok(UnitMode::Binary),
            other => Err(format!("unknown unit mode `{other}` (expected si or gib)")),
        }
    }
}

/// Renders `size` in GB or GiB with `decimals` fractional digits, rounding half away
/// from zero. All arithmetic is on integers so table values never pick up float error.
pub fn format_bytes(size: ByteSize, unit: UnitMode, decimals: u32) -> String {
    let scale = 10u128.pow(decimals);
    let div = unit.divisor();
    let scaled = size.0 as u128 * scale;
    let q = (2 * scaled + div) / (2 * div);
    let whole = q / scale;
    if decimals == 0 {
        format!("{whole} {}", unit.suffix())
    } else {
        let frac = q % scale;
        format!(
            "{whole}.{frac:0width$} {}",
            unit.suffix(),
            width = decimals as usize
        )
    }
}
