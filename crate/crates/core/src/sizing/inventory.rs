use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::units::ByteSize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub element_count: u64,
    pub dtype_bytes: u32,
    /// Non-parameter state such as rotary tables or quantization scales.
    #[serde(default)]
    pub is_buffer: bool,
}

impl ParamEntry {
    pub fn param(name: impl Into<String>, element_count: u64, dtype_bytes: u32) -> Self {
        Self {
            name: name.into(),
            element_count,
            dtype_bytes,
            is_buffer: false,
        }
    }

    pub fn buffer(name: impl Into<String>, element_count: u64, dtype_bytes: u32) -> Self {
        Self {
            is_buffer: true,
            ..Self::param(name, element_count, dtype_bytes)
        }
    }
}

/// Named tensors of a model, trainable or not, with their element counts and widths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamInventory {
    entries: Vec<ParamEntry>,
}

impl ParamInventory {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Validation(format!("duplicate tensor name `{}`", e.name)));
            }
            if e.dtype_bytes == 0 {
                return Err(Error::Validation(format!("tensor `{}` has zero dtype_bytes", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges another inventory (e.g. a second safetensors shard) into this one.
    pub fn extend(&mut self, other: ParamInventory) -> Result<()> {
        let mut all = std::mem::take(&mut self.entries);
        all.extend(other.entries);
        *self = ParamInventory::new(all)?;
        Ok(())
    }

    /// Accepts either `{"entries": [...]}` or a bare list of entries.
    pub fn from_json(doc: &Value) -> Result<Self> {
        let list = match doc {
            Value::Array(_) => doc.clone(),
            Value::Object(o) => o
                .get("entries")
                .cloned()
                .ok_or_else(|| Error::Schema { field: "entries".into() })?,
            _ => return Err(Error::Validation("inventory must be a list or an object".into())),
        };
        let entries: Vec<ParamEntry> = serde_json::from_value(list)
            .map_err(|e| Error::Validation(format!("inventory entry: {e}")))?;
        Self::new(entries)
    }

    /// Reads tensor names, dtypes and shapes from a `.safetensors` header without touching the
    /// tensor data. Every tensor is counted as a parameter.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
        let len = u64::from_le_bytes(len);
        if len > 100 << 20 {
            return Err(Error::Validation(format!(
                "{}: safetensors header of {len} bytes is implausibly large",
                path.display()
            )));
        }
        let mut header = vec![0u8; len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let header: BTreeMap<String, Value> = serde_json::from_slice(&header)?;

        let mut entries = Vec::with_capacity(header.len());
        for (name, info) in header {
            if name == "__metadata__" {
                continue;
            }
            let dtype = info.get("dtype").and_then(Value::as_str).ok_or_else(|| Error::Schema {
                field: format!("{name}.dtype"),
            })?;
            let dtype_bytes = safetensors_dtype_bytes(dtype)
                .ok_or_else(|| Error::Validation(format!("{name}: unsupported dtype {dtype}")))?;
            let shape = info.get("shape").and_then(Value::as_array).ok_or_else(|| Error::Schema {
                field: format!("{name}.shape"),
            })?;
            let element_count = shape.iter().try_fold(1u64, |acc, d| {
                d.as_u64()
                    .and_then(|d| acc.checked_mul(d))
                    .ok_or_else(|| Error::Validation(format!("{name}: bad shape")))
            })?;
            entries.push(ParamEntry::param(name, element_count, dtype_bytes));
        }
        Self::new(entries)
    }
}

impl<'de> Deserialize<'de> for ParamInventory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = Value::deserialize(d)?;
        ParamInventory::from_json(&doc).map_err(serde::de::Error::custom)
    }
}

fn safetensors_dtype_bytes(dtype: &str) -> Option<u32> {
    Some(match dtype {
        "BOOL" | "U8" | "I8" | "F8_E4M3" | "F8_E5M2" => 1,
        "I16" | "U16" | "F16" | "BF16" => 2,
        "I32" | "U32" | "F32" => 4,
        "I64" | "U64" | "F64" => 8,
        _ => return None,
    })
}

/// Total bytes held by parameters and by buffers, in that order.
pub fn param_and_buffer_size(inv: &ParamInventory) -> (ByteSize, ByteSize) {
    let (mut params, mut buffers) = (0u64, 0u64);
    for e in &inv.entries {
        let bytes = e.element_count.saturating_mul(e.dtype_bytes as u64);
        if e.is_buffer {
            buffers = buffers.saturating_add(bytes);
        } else {
            params = params.saturating_add(bytes);
        }
    }
    (ByteSize(params), ByteSize(buffers))
}
