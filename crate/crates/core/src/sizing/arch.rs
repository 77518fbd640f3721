use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::units::ByteSize;
use crate::error::{Error, Result};

/// Per-layer cache-relevant description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerDesc {
    Attention { n_kv_heads: u32, head_dim: u32 },
    /// Total recurrent state (conv + SSM) held per sequence by this layer.
    Ssm { state_bytes_per_sequence: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub model_id: String,
    pub vocab_size: u64,
    pub layers: Vec<LayerDesc>,
    /// Bytes per element of the model's parameters; also the default KV dtype.
    pub default_dtype_bytes: u32,
}

pub const VALID_DTYPE_BYTES: [u32; 4] = [1, 2, 4, 8];

impl ArchConfig {
    /// A homogeneous transformer: `n_layers` identical attention layers.
    pub fn transformer(
        model_id: impl Into<String>,
        vocab_size: u64,
        n_layers: usize,
        n_kv_heads: u32,
        head_dim: u32,
        dtype_bytes: u32,
    ) -> Result<Self> {
        let arch = ArchConfig {
            model_id: model_id.into(),
            vocab_size,
            layers: vec![
                LayerDesc::Attention {
                    n_kv_heads,
                    head_dim
                };
                n_layers
            ],
            default_dtype_bytes: dtype_bytes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("architecture has no layers".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Validation("vocab_size must be positive".into()));
        }
        if !VALID_DTYPE_BYTES.contains(&self.default_dtype_bytes) {
            return Err(Error::Validation(format!(
                "dtype_bytes must be one of 1, 2, 4, 8 (got {})",
                self.default_dtype_bytes
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerDesc::Attention {
                n_kv_heads,
                head_dim,
            } = layer
            {
                if *n_kv_heads == 0 || *head_dim == 0 {
                    return Err(Error::Validation(format!(
                        "layer {i}: n_kv_heads and head_dim must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn attention_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerDesc::Attention { .. }))
            .count()
    }

    pub fn ssm_layers(&self) -> usize {
        self.layers.len() - self.attention_layers()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheBreakdown {
    pub attention_bytes: ByteSize,
    pub ssm_bytes: ByteSize,
    pub total_bytes: ByteSize,
}

/// Analytic KV + SSM state footprint for `batch` sequences of `seq_len` tokens.
///
/// Attention layers hold keys and values: `2 * n_kv_heads * head_dim * dtype * batch * seq_len`.
/// SSM layers hold a fixed per-sequence state that does not grow with `seq_len`.
pub fn cache_size(
    arch: &ArchConfig,
    batch: u64,
    seq_len: u64,
    dtype_bytes_override: Option<u32>,
) -> Result<CacheBreakdown> {
    if batch < 1 {
        return Err(Error::Validation("batch must be at least 1".into()));
    }
    let dtype = match dtype_bytes_override {
        Some(0) => return Err(Error::Validation("cache dtype_bytes must be positive".into())),
        Some(d) => d,
        None => arch.default_dtype_bytes,
    } as u128;

    let mut per_token: u128 = 0;
    let mut ssm_per_seq: u128 = 0;
    for layer in &arch.layers {
        match *layer {
            LayerDesc::Attention {
                n_kv_heads,
                head_dim,
            } => per_token += 2 * n_kv_heads as u128 * head_dim as u128 * dtype,
            LayerDesc::Ssm {
                state_bytes_per_sequence,
            } => ssm_per_seq += state_bytes_per_sequence as u128,
        }
    }

    let to_u64 = |v: u128| {
        u64::try_from(v)
            .map(ByteSize)
            .map_err(|_| Error::Validation("cache size overflows 64-bit byte count".into()))
    };
    let overflow = || Error::Validation("cache size overflows 64-bit byte count".into());
    let attention = per_token
        .checked_mul(batch as u128 * seq_len as u128)
        .ok_or_else(overflow)?;
    let ssm = ssm_per_seq.checked_mul(batch as u128).ok_or_else(overflow)?;
    Ok(CacheBreakdown {
        attention_bytes: to_u64(attention)?,
        ssm_bytes: to_u64(ssm)?,
        total_bytes: to_u64(attention.checked_add(ssm).ok_or_else(overflow)?)?,
    })
}

/// Builds an [`ArchConfig`] from a model-hub style `config.json` tree.
///
/// Recognised keys (first alias is the one named in errors):
/// layer count `n_layers`/`num_hidden_layers`/`num_layers`/`n_layer`;
/// KV heads `n_kv_heads`/`num_key_value_heads` (falling back to `num_attention_heads`);
/// `head_dim` (falling back to `hidden_size / num_attention_heads`);
/// `dtype_bytes` or a `torch_dtype`/`dtype` name; `vocab`/`vocab_size`.
///
/// Hybrid models declare either `pattern: ["ATTENTION", "SSM", ...]` with one entry per layer,
/// or a `hybrid_override_pattern` string (`*` attention, `M` SSM, `-`/`E` MLP layers that hold
/// no cache). SSM layers need `ssm_state_bytes`. Keys may also sit under an `elana` object.
pub fn parse_arch(doc: &Value) -> Result<ArchConfig> {
    let root = doc
        .as_object()
        .ok_or_else(|| Error::Validation("architecture config must be a JSON object".into()))?;
    let ext = root.get("elana").and_then(Value::as_object);
    let get = |keys: &[&str]| -> Option<&Value> {
        keys.iter()
            .find_map(|k| ext.and_then(|e| e.get(*k)).or_else(|| root.get(*k)))
            .filter(|v| !v.is_null())
    };

    let n_layers = require_int(get(&["n_layers", "num_hidden_layers", "num_layers", "n_layer"]), "n_layers")?;
    if n_layers == 0 {
        return Err(Error::Validation("n_layers must be positive".into()));
    }
    let vocab_size = require_int(get(&["vocab", "vocab_size"]), "vocab")?;
    let dtype_bytes = parse_dtype(get(&["dtype_bytes"]), get(&["torch_dtype", "dtype"]))?;
    let model_id = get(&["model_id", "_name_or_path", "name"])
        .and_then(Value::as_str)
        .or_else(|| root.get("model_type").and_then(Value::as_str))
        .unwrap_or("unknown")
        .to_string();

    let kinds = layer_kinds(get(&["pattern"]), get(&["hybrid_override_pattern"]), n_layers)?;

    let mut layers = Vec::with_capacity(kinds.len());
    let has_attention = kinds.contains(&Kind::Attention);
    let has_ssm = kinds.contains(&Kind::Ssm);
    let attn = if has_attention {
        Some(attention_dims(get)?)
    } else {
        None
    };
    let ssm_bytes = if has_ssm {
        Some(require_int(get(&["ssm_state_bytes"]), "ssm_state_bytes")?)
    } else {
        None
    };
    for kind in kinds {
        layers.push(match kind {
            Kind::Attention => {
                let (n_kv_heads, head_dim) = attn.expect("attention dims parsed");
                LayerDesc::Attention {
                    n_kv_heads,
                    head_dim,
                }
            }
            Kind::Ssm => LayerDesc::Ssm {
                state_bytes_per_sequence: ssm_bytes.expect("ssm bytes parsed"),
            },
            Kind::Stateless => continue,
        });
    }

    let arch = ArchConfig {
        model_id,
        vocab_size,
        layers,
        default_dtype_bytes: dtype_bytes,
    };
    arch.validate()?;
    Ok(arch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Attention,
    Ssm,
    Stateless,
}

fn layer_kinds(pattern: Option<&Value>, hybrid: Option<&Value>, n_layers: u64) -> Result<Vec<Kind>> {
    let kinds: Vec<Kind> = if let Some(p) = pattern {
        let list = p
            .as_array()
            .ok_or_else(|| Error::Validation("`pattern` must be a list of layer kinds".into()))?;
        list.iter()
            .map(|v| match v.as_str().map(str::to_ascii_uppercase).as_deref() {
                Some("ATTENTION") => Ok(Kind::Attention),
                Some("SSM") => Ok(Kind::Ssm),
                _ => Err(Error::Validation(format!(
                    "unknown layer kind {v} in `pattern` (expected ATTENTION or SSM)"
                ))),
            })
            .collect::<Result<_>>()?
    } else if let Some(h) = hybrid {
        let s = h.as_str().ok_or_else(|| {
            Error::Validation("`hybrid_override_pattern` must be a string".into())
        })?;
        s.chars()
            .map(|c| match c {
                '*' => Ok(Kind::Attention),
                'M' => Ok(Kind::Ssm),
                '-' | 'E' => Ok(Kind::Stateless),
                other => Err(Error::Validation(format!(
                    "unknown symbol `{other}` in hybrid_override_pattern"
                ))),
            })
            .collect::<Result<_>>()?
    } else {
        return Ok(vec![Kind::Attention; n_layers as usize]);
    };
    if kinds.len() as u64 != n_layers {
        return Err(Error::Validation(format!(
            "layer pattern has {} entries but n_layers is {n_layers}",
            kinds.len()
        )));
    }
    Ok(kinds)
}

fn attention_dims<'a>(get: impl Fn(&[&str]) -> Option<&'a Value>) -> Result<(u32, u32)> {
    let n_heads = get(&["num_attention_heads", "n_heads", "n_head"]);
    let n_kv_heads = match get(&["n_kv_heads", "num_key_value_heads"]).or(n_heads) {
        Some(v) => to_u32(require_int(Some(v), "n_kv_heads")?, "n_kv_heads")?,
        None => return Err(Error::Schema { field: "n_kv_heads".into() }),
    };
    let head_dim = match get(&["head_dim"]) {
        Some(v) => require_int(Some(v), "head_dim")?,
        None => {
            let hidden = get(&["hidden_size", "d_model", "n_embd"])
                .ok_or_else(|| Error::Schema { field: "head_dim".into() })?;
            let hidden = require_int(Some(hidden), "hidden_size")?;
            let heads = require_int(
                Some(n_heads.ok_or_else(|| Error::Schema { field: "head_dim".into() })?),
                "num_attention_heads",
            )?;
            if heads == 0 {
                return Err(Error::Validation("num_attention_heads must be positive".into()));
            }
            hidden / heads
        }
    };
    if n_kv_heads == 0 || head_dim == 0 {
        return Err(Error::Validation("n_kv_heads and head_dim must be positive".into()));
    }
    Ok((n_kv_heads, to_u32(head_dim, "head_dim")?))
}

fn require_int(v: Option<&Value>, field: &str) -> Result<u64> {
    let v = v.ok_or_else(|| Error::Schema { field: field.into() })?;
    if let Some(n) = v.as_u64() {
        return Ok(n);
    }
    match v.as_i64() {
        Some(n) if n < 0 => Err(Error::Validation(format!("{field} must be non-negative (got {n})"))),
        _ => Err(Error::Validation(format!("{field} must be an integer (got {v})"))),
    }
}

fn to_u32(v: u64, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{field} is out of range ({v})")))
}

/// Bytes per element for a dtype name as it appears in hub configs.
pub fn dtype_name_bytes(name: &str) -> Option<u32> {
    let n = name.trim().trim_start_matches("torch.").to_ascii_lowercase();
    Some(match n.as_str() {
        "float16" | "fp16" | "half" | "bfloat16" | "bf16" | "int16" | "f16" => 2,
        "float32" | "fp32" | "float" | "int32" | "f32" | "tf32" => 4,
        "float64" | "fp64" | "double" | "int64" | "f64" => 8,
        "int8" | "uint8" | "fp8" | "float8_e4m3fn" | "float8_e5m2" | "float8_e4m3fnuz"
        | "float8_e5m2fnuz" => 1,
        _ => return None,
    })
}

fn parse_dtype(explicit: Option<&Value>, named: Option<&Value>) -> Result<u32> {
    if let Some(v) = explicit {
        let b = to_u32(require_int(Some(v), "dtype_bytes")?, "dtype_bytes")?;
        if b == 0 {
            return Err(Error::Validation("dtype_bytes must be positive".into()));
        }
        return Ok(b);
    }
    match named {
        Some(Value::String(s)) => dtype_name_bytes(s)
            .ok_or_else(|| Error::Validation(format!("unsupported dtype `{s}`"))),
        Some(other) => Err(Error::Validation(format!("dtype must be a string (got {other})"))),
        None => Err(Error::Schema {
            field: "dtype_bytes".into(),
        }),
    }
}
