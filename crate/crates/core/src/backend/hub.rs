//! Model-hub backend: drives a Python worker that loads the model through the
//! `AutoModelForCausalLM` interface and answers line-delimited JSON requests.
//!
//! Any locally loadable model directory works too, so custom or compressed models
//! only need to be loadable by that worker.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde_json::{json, Value};

use super::{next_backend_id, Backend, BackendCaps, DecodeState, TokenBatch};
use crate::clock::{RealClock, SharedClock};
use crate::error::{Error, Result};
use crate::latency::Workload;
use crate::sizing::ParamInventory;
use crate::trace::{SpanRecorder, Track};

pub const WORKER_SCRIPT: &str = include_str!("hub_worker.py");

pub struct HubBackend {
    id: u64,
    model: String,
    model_id: String,
    caps: BackendCaps,
    clock: SharedClock,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    generation: u64,
    spans: Option<SpanRecorder>,
}

impl HubBackend {
    /// Starts the worker with `python3` and waits for the model to load.
    pub fn spawn(model: &str) -> Result<Self> {
        Self::spawn_with("python3", model)
    }

    pub fn spawn_with(python: &str, model: &str) -> Result<Self> {
        let mut child = Command::new(python)
            .arg("-c")
            .arg(WORKER_SCRIPT)
            .arg(model)
            .env("HF_HUB_DISABLE_PROGRESS_BARS", "1")
            .env("TRANSFORMERS_VERBOSITY", "error")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::backend_with(format!("cannot start `{python}` for hub backend"), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = Self {
            id: next_backend_id(),
            model: model.to_string(),
            model_id: model.to_string(),
            caps: BackendCaps {
                vocab_size: 0,
                supports_decode_graph: false,
                device_ids: vec![],
            },
            clock: RealClock::shared(),
            child,
            stdin,
            stdout,
            generation: 0,
            spans: None,
        };
        let hello = backend.read_reply()?;
        backend.caps = BackendCaps {
            vocab_size: hello["vocab_size"].as_u64().unwrap_or(0),
            supports_decode_graph: hello["supports_decode_graph"].as_bool().unwrap_or(false),
            device_ids: hello["devices"]
                .as_array()
                .map(|d| d.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                .unwrap_or_default(),
        };
        if let Some(id) = hello["model_id"].as_str() {
            backend.model_id = id.to_string();
        }
        if backend.caps.vocab_size < 2 || backend.caps.device_ids.is_empty() {
            return Err(Error::backend("hub worker reported an unusable model description"));
        }
        Ok(backend)
    }

    fn read_reply(&mut self) -> Result<Value> {
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| Error::backend_with("hub worker pipe closed", e))?;
        if n == 0 {
            return Err(Error::backend(format!("hub worker for `{}` exited", self.model)));
        }
        let reply: Value = serde_json::from_str(&line)
            .map_err(|e| Error::backend_with("malformed reply from hub worker", e))?;
        if reply["ok"].as_bool() != Some(true) {
            let msg = reply["error"].as_str().unwrap_or("unknown failure");
            return Err(Error::backend(format!("hub worker: {msg}")));
        }
        Ok(reply)
    }

    fn request(&mut self, req: Value) -> Result<Value> {
        writeln!(self.stdin, "{req}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::backend_with("cannot write to hub worker", e))?;
        self.read_reply()
    }

    fn tokens(reply: &Value) -> Result<Vec<u32>> {
        reply["tokens"]
            .as_array()
            .and_then(|a| a.iter().map(|t| t.as_u64().map(|t| t as u32)).collect())
            .ok_or_else(|| Error::backend("hub worker reply lacks tokens"))
    }

    fn span(&self, name: &str, start_ns: u64) {
        if let Some(rec) = &self.spans {
            let end = self.clock.now_ns();
            rec.record_span_ns(name, "step", start_ns, end - start_ns, Track::device(0), None);
        }
    }

}

impl Backend for HubBackend {
    fn caps(&self) -> &BackendCaps {
        &self.caps
    }

    fn param_inventory(&mut self) -> Option<Result<ParamInventory>> {
        Some(
            self.request(json!({"op": "inventory"}))
                .and_then(|reply| ParamInventory::from_json(&reply)),
        )
    }

    fn describe(&self) -> String {
        format!("hub:{}", self.model)
    }

    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn prefill(&mut self, prompts: &TokenBatch) -> Result<(DecodeState, Vec<u32>)> {
        if prompts.length() == 0 {
            return Err(Error::Validation("prefill needs a prompt of at least one token".into()));
        }
        prompts.check_vocab(self.caps.vocab_size)?;
        let rows: Vec<&[u32]> = prompts.rows().collect();
        let t0 = self.clock.now_ns();
        let reply = self.request(json!({"op": "prefill", "tokens": rows}))?;
        self.span("prefill", t0);
        let first = Self::tokens(&reply)?;
        self.generation += 1;
        let state = DecodeState::new(self.id, self.generation, prompts.length() + 1, first.clone());
        Ok((state, first))
    }

    fn decode_step(&mut self, state: &mut DecodeState) -> Result<Vec<u32>> {
        state.check(self.id, self.generation)?;
        let t0 = self.clock.now_ns();
        let reply = self.request(json!({"op": "decode"}))?;
        self.span("decode_step", t0);
        let next = Self::tokens(&reply)?;
        state.advance(next.clone());
        Ok(next)
    }

    fn prepare_decode(&mut self, _workload: &Workload) -> Result<()> {
        Err(Error::Capability(
            "hub backend does not capture decode graphs".into(),
        ))
    }

    fn synchronize(&mut self) -> Result<()> {
        self.request(json!({"op": "sync"})).map(|_| ())
    }

    fn set_span_recorder(&mut self, recorder: Option<SpanRecorder>) {
        self.spans = recorder;
    }
}

impl Drop for HubBackend {
    fn drop(&mut self) {
        let _ = writeln!(self.stdin, "{}", json!({"op": "shutdown"}));
        let _ = self.stdin.flush();
        if self.child.try_wait().ok().flatten().is_none() {
            // give the worker a moment to exit on its own before killing it
            std::thread::sleep(std::time::Duration::from_millis(50));
            if self.child.try_wait().ok().flatten().is_none() {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_interpreter_is_backend_error() {
        let err = HubBackend::spawn_with("/nonexistent/python3", "gpt2").err().unwrap();
        assert!(matches!(err, Error::Backend { .. }));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn worker_load_failure_is_reported() {
        if Command::new("python3").arg("-c").arg("import transformers").status().map_or(true, |s| !s.success()) {
            return;
        }
        let err = HubBackend::spawn("/nonexistent/model/dir").err().unwrap();
        assert!(err.to_string().contains("hub worker"), "{err}");
    }
}
