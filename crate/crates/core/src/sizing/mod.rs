//! Parameter, buffer and cache footprints derived from architecture metadata.

mod arch;
mod inventory;
mod units;

pub use arch::{cache_size, dtype_name_bytes, parse_arch, ArchConfig, CacheBreakdown, LayerDesc};
pub use inventory::{param_and_buffer_size, ParamEntry, ParamInventory};
pub use units::{format_bytes, ByteSize, UnitMode};
