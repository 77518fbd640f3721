//! The contract the latency harnesses drive, plus the backends that implement it.
//!
//! A backend owns its device work: [`Backend::prefill`] and [`Backend::decode_step`] may return
//! before the device is idle, and [`Backend::synchronize`] is the timing fence.

mod hub;
mod simulated;

use std::any::Any;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hub::{HubBackend, WORKER_SCRIPT};
pub use simulated::{ClockMode, SimulatedBackend, SimulatedBackendConfig};

use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::latency::Workload;
use crate::sizing::ParamInventory;
use crate::trace::SpanRecorder;

/// Row-major `(batch, length)` matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    token_ids: Vec<u32>,
    batch: usize,
    length: usize,
}

impl TokenBatch {
    pub fn new(token_ids: Vec<u32>, batch: usize, length: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Validation("token batch must have at least one row".into()));
        }
        if token_ids.len() != batch * length {
            return Err(Error::Validation(format!(
                "token batch has {} ids, expected {batch} x {length}",
                token_ids.len()
            )));
        }
        Ok(Self {
            token_ids,
            batch,
            length,
        })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let length = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != length) {
            return Err(Error::Validation("token batch rows differ in length".into()));
        }
        Self::new(rows.concat(), rows.len(), length)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.token_ids.chunks(self.length.max(1)).take(self.batch)
    }

    /// Fails if any id falls outside `[0, vocab_size)`.
    pub fn check_vocab(&self, vocab_size: u64) -> Result<()> {
        match self.token_ids.iter().position(|&t| t as u64 >= vocab_size) {
            Some(i) => Err(Error::Validation(format!(
                "token id {} at row {}, column {} is outside the vocabulary of {vocab_size}",
                self.token_ids[i],
                i / self.length.max(1),
                i % self.length.max(1)
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCaps {
    pub vocab_size: u64,
    pub supports_decode_graph: bool,
    pub device_ids: Vec<String>,
}

/// Opaque per-request state handed from `prefill` to successive `decode_step` calls.
///
/// Only the backend that created it may advance it; a newer `prefill` on the same backend makes
/// older states stale.
pub struct DecodeState {
    owner: u64,
    generation: u64,
    batch: usize,
    position: usize,
    last_tokens: Vec<u32>,
    payload: Option<Box<dyn Any + Send>>,
}

impl DecodeState {
    pub fn new(owner: u64, generation: u64, position: usize, last_tokens: Vec<u32>) -> Self {
        Self {
            owner,
            generation,
            batch: last_tokens.len(),
            position,
            last_tokens,
            payload: None,
        }
    }

    pub fn with_payload(mut self, payload: impl Any + Send) -> Self {
        self.payload = Some(Box::new(payload));
        self
    }

    pub fn owner(&self) -> u64 {
        self.owner
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of tokens (prompt + generated) the state currently covers.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn last_tokens(&self) -> &[u32] {
        &self.last_tokens
    }

    pub fn payload_mut<T: 'static>(&mut self) -> Option<&mut T> {
        self.payload.as_mut()?.downcast_mut()
    }

    /// Records one generated token per sequence.
    pub fn advance(&mut self, tokens: Vec<u32>) {
        debug_assert_eq!(tokens.len(), self.batch);
        self.position += 1;
        self.last_tokens = tokens;
    }

    /// Shared ownership/staleness check for backend implementations.
    pub fn check(&self, owner: u64, current_generation: u64) -> Result<()> {
        if self.owner != owner {
            return Err(Error::Validation(
                "decode state belongs to a different backend instance".into(),
            ));
        }
        if self.generation != current_generation {
            return Err(Error::Validation(
                "decode state is stale: a newer prefill has been issued".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Debug for DecodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DecodeState")
            .field("owner", &self.owner)
            .field("generation", &self.generation)
            .field("batch", &self.batch)
            .field("position", &self.position)
            .finish_non_exhaustive()
    }
}

static NEXT_BACKEND_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique id for tagging [`DecodeState`]s.
pub fn next_backend_id() -> u64 {
    NEXT_BACKEND_ID.fetch_add(1, Ordering::Relaxed)
}

pub trait Backend: Send {
    fn caps(&self) -> &BackendCaps;

    /// Human-readable identity recorded in reports.
    fn describe(&self) -> String;

    fn model_id(&self) -> String;

    /// The time source the harness must use to time this backend.
    fn clock(&self) -> SharedClock;

    /// Runs the prompt through the model and returns the decode state plus token 1 of every
    /// sequence. Never uses a prepared decode path.
    fn prefill(&mut self, prompts: &TokenBatch) -> Result<(DecodeState, Vec<u32>)>;

    /// Generates exactly one more token per sequence, feeding back the previous ones.
    fn decode_step(&mut self, state: &mut DecodeState) -> Result<Vec<u32>>;

    /// Captures a fast decode path for the workload shape. Idempotent.
    /// Returns [`Error::Capability`] when the backend has none.
    fn prepare_decode(&mut self, workload: &Workload) -> Result<()>;

    /// Blocks until all issued device work is complete.
    fn synchronize(&mut self) -> Result<()>;

    /// Installs (or removes) a sink for kernel-level spans.
    fn set_span_recorder(&mut self, _recorder: Option<SpanRecorder>) {}

    /// Parameter and buffer tensors of the loaded model, if the backend can list them.
    fn param_inventory(&mut self) -> Option<Result<ParamInventory>> {
        None
    }
}

/// Parsed `--backend` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    /// `simulated:<path-to-config>`
    Simulated(PathBuf),
    /// `hub:<model-identifier-or-local-path>`
    Hub(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("simulated", path)) if !path.is_empty() => Ok(Self::Simulated(path.into())),
            Some(("hub", model)) if !model.is_empty() => Ok(Self::Hub(model.to_string())),
            _ => Err(format!(
                "invalid backend `{s}` (expected simulated:<config> or hub:<model>)"
            )),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Simulated(p) => write!(f, "simulated:{}", p.display()),
            Self::Hub(m) => write!(f, "hub:{m}"),
        }
    }
}

pub fn open_backend(spec: &BackendSpec) -> Result<Box<dyn Backend>> {
    Ok(match spec {
        BackendSpec::Simulated(path) => {
            let config = SimulatedBackendConfig::from_file(path)?;
            Box::new(SimulatedBackend::with_description(config, spec.to_string())?)
        }
        BackendSpec::Hub(model) => Box::new(HubBackend::spawn(model)?),
    })
}

/// Uniform random prompts; a pure function of its arguments.
pub fn generate_random_prompts(vocab_size: u64, batch: usize, length: usize, seed: u64) -> Result<TokenBatch> {
    if vocab_size < 2 {
        return Err(Error::Validation(format!(
            "vocab_size must be at least 2 to draw random prompts (got {vocab_size})"
        )));
    }
    if vocab_size > u32::MAX as u64 + 1 {
        return Err(Error::Validation(format!("vocab_size {vocab_size} exceeds 32-bit token ids")));
    }
    if batch == 0 || length == 0 {
        return Err(Error::Validation("prompt batch and length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..batch * length)
        .map(|_| rng.gen_range(0..vocab_size) as u32)
        .collect();
    TokenBatch::new(ids, batch, length)
}

/// Derives an independent seed for `(stream, index)` from a base seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
