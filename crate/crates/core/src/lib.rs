//! Size, latency and energy profiling for language-model inference.

pub mod backend;
pub mod clock;
pub mod energy;
pub mod error;
pub mod latency;
pub mod sizing;
pub mod trace;

pub use error::{Error, Result};
pub mod report;
pub mod cli;
