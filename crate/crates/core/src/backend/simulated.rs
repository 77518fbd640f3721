use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{next_backend_id, Backend, BackendCaps, DecodeState, TokenBatch};
use crate::clock::{ms_to_ns, RealClock, SharedClock, VirtualClock};
use crate::error::{Error, Result};
use crate::latency::Workload;
use crate::trace::{SpanRecorder, Track};

/// Which clock a simulated backend burns its configured durations on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Durations advance a virtual clock instantly; runs are exactly reproducible.
    #[default]
    Virtual,
    /// Durations are slept on the OS monotonic clock.
    Real,
}

fn default_speedup() -> f64 {
    1.0
}
fn default_vocab() -> u64 {
    32_000
}
fn default_true() -> bool {
    true
}
fn default_devices() -> Vec<String> {
    vec!["sim0".into()]
}
fn default_model_id() -> String {
    "simulated".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedBackendConfig {
    #[serde(default)]
    pub prefill_base_ms: f64,
    #[serde(default)]
    pub prefill_per_token_ms: f64,
    #[serde(default)]
    pub decode_step_ms: f64,
    /// Multiplier on `decode_step_ms` once a decode graph is prepared, in (0, 1].
    #[serde(default = "default_speedup")]
    pub decode_graph_speedup: f64,
    /// Each call's duration is perturbed by uniform noise in [-jitter_ms, +jitter_ms].
    #[serde(default)]
    pub jitter_ms: f64,
    /// Added to the first call made on the backend, whatever it is.
    #[serde(default)]
    pub warmup_penalty_ms: f64,
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
    #[serde(default = "default_true")]
    pub supports_decode_graph: bool,
    #[serde(default = "default_devices")]
    pub devices: Vec<String>,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    /// Emit per-kernel spans (embedding, attention, mlp, lm_head) inside each call.
    #[serde(default = "default_true")]
    pub kernel_spans: bool,
}

impl Default for SimulatedBackendConfig {
    fn default() -> Self {
        Self {
            prefill_base_ms: 0.0,
            prefill_per_token_ms: 0.0,
            decode_step_ms: 0.0,
            decode_graph_speedup: 1.0,
            jitter_ms: 0.0,
            warmup_penalty_ms: 0.0,
            seed: 0,
            vocab_size: default_vocab(),
            supports_decode_graph: true,
            devices: default_devices(),
            clock: ClockMode::Virtual,
            model_id: default_model_id(),
            kernel_spans: true,
        }
    }
}

impl SimulatedBackendConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let durations = [
            ("prefill_base_ms", self.prefill_base_ms),
            ("prefill_per_token_ms", self.prefill_per_token_ms),
            ("decode_step_ms", self.decode_step_ms),
            ("jitter_ms", self.jitter_ms),
            ("warmup_penalty_ms", self.warmup_penalty_ms),
        ];
        for (name, v) in durations {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be finite and non-negative (got {v})")));
            }
        }
        if !(self.decode_graph_speedup > 0.0 && self.decode_graph_speedup <= 1.0) {
            return Err(Error::Validation(format!(
                "decode_graph_speedup must be in (0, 1] (got {})",
                self.decode_graph_speedup
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Validation("vocab_size must be at least 2".into()));
        }
        if self.devices.is_empty() {
            return Err(Error::Validation("devices must not be empty".into()));
        }
        Ok(())
    }

    /// Expected jitter-free prefill duration.
    pub fn prefill_ms(&self, batch: usize, length: usize) -> f64 {
        self.prefill_base_ms + self.prefill_per_token_ms * (batch * length) as f64
    }

    /// Expected jitter-free decode step duration.
    pub fn decode_ms(&self, prepared: bool) -> f64 {
        if prepared {
            self.decode_step_ms * self.decode_graph_speedup
        } else {
            self.decode_step_ms
        }
    }
}

// Fractions of each call attributed to synthetic kernels.
const KERNELS: [(&str, f64); 4] = [
    ("embedding", 0.04),
    ("attention", 0.46),
    ("mlp", 0.46),
    ("lm_head", 0.04),
];

/// A GPU-free backend whose call durations follow [`SimulatedBackendConfig`] exactly
/// (plus seeded jitter) and whose tokens are a deterministic function of the seed.
pub struct SimulatedBackend {
    id: u64,
    config: SimulatedBackendConfig,
    caps: BackendCaps,
    clock: SharedClock,
    rng: ChaCha8Rng,
    calls: u64,
    generation: u64,
    prepared_batch: Option<usize>,
    spans: Option<SpanRecorder>,
    description: String,
}

impl SimulatedBackend {
    pub fn new(config: SimulatedBackendConfig) -> Result<Self> {
        Self::with_description(config, "simulated".into())
    }

    pub fn with_description(config: SimulatedBackendConfig, description: String) -> Result<Self> {
        config.validate()?;
        let clock: SharedClock = match config.clock {
            ClockMode::Virtual => Arc::new(VirtualClock::new()),
            ClockMode::Real => Arc::new(RealClock::new()),
        };
        Ok(Self {
            id: next_backend_id(),
            caps: BackendCaps {
                vocab_size: config.vocab_size,
                supports_decode_graph: config.supports_decode_graph,
                device_ids: config.devices.clone(),
            },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            clock,
            config,
            calls: 0,
            generation: 0,
            prepared_batch: None,
            spans: None,
            description,
        })
    }

    pub fn config(&self) -> &SimulatedBackendConfig {
        &self.config
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared_batch.is_some()
    }

    fn busy(&mut self, name: &str, nominal_ms: f64, args: Vec<(&str, u64)>) {
        let mut ms = nominal_ms;
        if self.calls == 0 {
            ms += self.config.warmup_penalty_ms;
        }
        self.calls += 1;
        if self.config.jitter_ms > 0.0 {
            let j = self.config.jitter_ms;
            ms += self.rng.gen_range(-j..=j);
        }
        let dur_ns = ms_to_ns(ms.max(0.0));
        let start_ns = self.clock.now_ns();
        self.clock.elapse(dur_ns);
        if let Some(rec) = &self.spans {
            let track = Track::device(0);
            let args = args
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::from(v)))
                .collect();
            rec.record_span_ns(name, "step", start_ns, dur_ns, track, Some(args));
            if self.config.kernel_spans {
                let mut at = start_ns;
                for (i, (kernel, share)) in KERNELS.iter().enumerate() {
                    let d = if i + 1 == KERNELS.len() {
                        start_ns + dur_ns - at
                    } else {
                        (dur_ns as f64 * share) as u64
                    };
                    rec.record_span_ns(kernel, "kernel", at, d, Track::device(1), None);
                    at += d;
                }
            }
        }
    }

    fn next_token(&self, prev: u64, position: usize, row: usize) -> u32 {
        let h = super::derive_seed(self.config.seed ^ prev, position as u64, row as u64);
        (h % self.config.vocab_size) as u32
    }
}

impl Backend for SimulatedBackend {
    fn caps(&self) -> &BackendCaps {
        &self.caps
    }

    fn describe(&self) -> String {
        self.description.clone()
    }

    fn model_id(&self) -> String {
        self.config.model_id.clone()
    }

    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn prefill(&mut self, prompts: &TokenBatch) -> Result<(DecodeState, Vec<u32>)> {
        if prompts.length() == 0 {
            return Err(Error::Validation("prefill needs a prompt of at least one token".into()));
        }
        prompts.check_vocab(self.caps.vocab_size)?;
        let ms = self.config.prefill_ms(prompts.batch(), prompts.length());
        self.busy(
            "prefill",
            ms,
            vec![("batch", prompts.batch() as u64), ("length", prompts.length() as u64)],
        );
        let first: Vec<u32> = prompts
            .rows()
            .enumerate()
            .map(|(row, ids)| {
                let digest = ids.iter().fold(0u64, |acc, &t| {
                    acc.rotate_left(7) ^ super::derive_seed(t as u64, 0, 0)
                });
                self.next_token(digest, prompts.length(), row)
            })
            .collect();
        self.generation += 1;
        let state = DecodeState::new(self.id, self.generation, prompts.length() + 1, first.clone());
        Ok((state, first))
    }

    fn decode_step(&mut self, state: &mut DecodeState) -> Result<Vec<u32>> {
        state.check(self.id, self.generation)?;
        let prepared = self.prepared_batch == Some(state.batch());
        let ms = self.config.decode_ms(prepared);
        let name = if prepared { "decode_step_graph" } else { "decode_step" };
        self.busy(name, ms, vec![("position", state.position() as u64)]);
        let next: Vec<u32> = state
            .last_tokens()
            .iter()
            .enumerate()
            .map(|(row, &t)| self.next_token(t as u64, state.position(), row))
            .collect();
        state.advance(next.clone());
        Ok(next)
    }

    fn prepare_decode(&mut self, workload: &Workload) -> Result<()> {
        if !self.config.supports_decode_graph {
            return Err(Error::Capability(
                "simulated backend configured without decode-graph support".into(),
            ));
        }
        self.prepared_batch = Some(workload.batch);
        Ok(())
    }

    fn synchronize(&mut self) -> Result<()> {
        Ok(())
    }

    fn set_span_recorder(&mut self, recorder: Option<SpanRecorder>) {
        self.spans = recorder;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::generate_random_prompts;
    use crate::clock::ns_to_ms;

    fn config() -> SimulatedBackendConfig {
        SimulatedBackendConfig {
            prefill_base_ms: 5.0,
            prefill_per_token_ms: 0.01,
            decode_step_ms: 10.0,
            decode_graph_speedup: 0.8,
            seed: 11,
            vocab_size: 100,
            ..Default::default()
        }
    }

    fn timed<T>(b: &mut SimulatedBackend, f: impl FnOnce(&mut SimulatedBackend) -> T) -> (T, f64) {
        let clock = b.clock();
        let t0 = clock.now_ns();
        let out = f(b);
        (out, ns_to_ms(clock.now_ns() - t0))
    }

    fn workload(batch: usize) -> Workload {
        Workload { batch, ..Workload::default() }
    }

    #[test]
    fn prefill_duration_is_analytic() {
        let mut b = SimulatedBackend::new(config()).unwrap();
        let p = generate_random_prompts(100, 2, 100, 1).unwrap();
        let clock = b.clock();
        let t0 = clock.now_ns();
        let (state, first) = b.prefill(&p).unwrap();
        assert!((ns_to_ms(clock.now_ns() - t0) - 7.0).abs() < 1e-9);
        assert_eq!(first.len(), 2);
        assert_eq!(state.position(), 101);
    }

    #[test]
    fn warmup_penalty_hits_first_call_only() {
        let mut b = SimulatedBackend::new(SimulatedBackendConfig { warmup_penalty_ms: 50.0, ..config() }).unwrap();
        let p = generate_random_prompts(100, 2, 100, 1).unwrap();
        let clock = b.clock();
        let mut durations = vec![];
        for _ in 0..2 {
            let t0 = clock.now_ns();
            b.prefill(&p).unwrap();
            durations.push(ns_to_ms(clock.now_ns() - t0));
        }
        assert!((durations[0] - 57.0).abs() < 1e-9);
        assert!((durations[1] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn prepared_decode_is_faster_but_emits_same_tokens() {
        let p = generate_random_prompts(100, 3, 8, 2).unwrap();
        let mut plain = SimulatedBackend::new(config()).unwrap();
        let mut fast = SimulatedBackend::new(config()).unwrap();
        fast.prepare_decode(&workload(3)).unwrap();
        fast.prepare_decode(&workload(3)).unwrap();

        let (mut s1, f1) = plain.prefill(&p).unwrap();
        let (mut s2, f2) = fast.prefill(&p).unwrap();
        assert_eq!(f1, f2);
        for _ in 0..5 {
            let (a, d_plain) = timed(&mut plain, |x| x.decode_step(&mut s1).unwrap());
            let (b, d_fast) = timed(&mut fast, |x| x.decode_step(&mut s2).unwrap());
            assert_eq!(a, b);
            assert!((d_plain - 10.0).abs() < 1e-9);
            assert!((d_fast - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_graph_only_applies_to_prepared_shape() {
        let mut b = SimulatedBackend::new(config()).unwrap();
        b.prepare_decode(&workload(4)).unwrap();
        let (mut s, _) = b.prefill(&generate_random_prompts(100, 2, 8, 2).unwrap()).unwrap();
        let (_, d) = timed(&mut b, |x| x.decode_step(&mut s).unwrap());
        assert!((d - 10.0).abs() < 1e-9);
    }

    #[test]
    fn unsupported_prepare_is_capability_error() {
        let mut b = SimulatedBackend::new(SimulatedBackendConfig { supports_decode_graph: false, ..config() }).unwrap();
        assert!(matches!(b.prepare_decode(&workload(1)), Err(Error::Capability(_))));
    }

    #[test]
    fn foreign_and_stale_states_rejected() {
        let p = generate_random_prompts(100, 1, 4, 0).unwrap();
        let mut a = SimulatedBackend::new(config()).unwrap();
        let mut b = SimulatedBackend::new(config()).unwrap();
        let (mut sa, _) = a.prefill(&p).unwrap();
        assert!(matches!(b.decode_step(&mut sa), Err(Error::Validation(_))));
        let (_, _) = a.prefill(&p).unwrap();
        assert!(matches!(a.decode_step(&mut sa), Err(Error::Validation(_))));
    }

    #[test]
    fn prefill_validates_input() {
        let mut b = SimulatedBackend::new(config()).unwrap();
        let oov = TokenBatch::new(vec![5, 100], 1, 2).unwrap();
        assert!(matches!(b.prefill(&oov), Err(Error::Validation(_))));
        let empty = TokenBatch::new(vec![], 1, 0).unwrap();
        assert!(matches!(b.prefill(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn jitter_is_bounded_and_seeded() {
        let cfg = SimulatedBackendConfig { jitter_ms: 0.5, ..config() };
        let run = || {
            let mut b = SimulatedBackend::new(cfg.clone()).unwrap();
            let p = generate_random_prompts(100, 2, 100, 1).unwrap();
            (0..50)
                .map(|_| timed(&mut b, |x| x.prefill(&p).unwrap()).1)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|d| (d - 7.0).abs() <= 0.5 + 1e-6));
        assert!(a.iter().any(|d| (d - 7.0).abs() > 0.01));
    }

    #[test]
    fn config_validation() {
        for bad in [
            SimulatedBackendConfig { decode_graph_speedup: 0.0, ..config() },
            SimulatedBackendConfig { decode_graph_speedup: 1.5, ..config() },
            SimulatedBackendConfig { jitter_ms: -1.0, ..config() },
            SimulatedBackendConfig { decode_step_ms: f64::NAN, ..config() },
            SimulatedBackendConfig { vocab_size: 1, ..config() },
            SimulatedBackendConfig { devices: vec![], ..config() },
        ] {
            assert!(SimulatedBackend::new(bad).is_err());
        }
    }

    #[test]
    fn config_file_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.json");
        std::fs::write(&path, r#"{"prefill_base_ms": 5, "decode_step_ms": 10}"#).unwrap();
        let c = SimulatedBackendConfig::from_file(&path).unwrap();
        assert_eq!(c.decode_graph_speedup, 1.0);
        assert_eq!(c.clock, ClockMode::Virtual);
        assert!(SimulatedBackendConfig::from_file(&dir.path().join("missing.json")).is_err());
    }
}
