use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::sources::{open_reader, PowerReader, PowerSourceDesc};
use super::{PhaseMark, PowerSample, PowerTrace};
use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::latency::{Metric, PhaseListener, PhaseWindow};

pub const DEFAULT_INTERVAL_S: f64 = 0.1;

/// A running power sampler. Samples are appended by a dedicated thread; the measuring thread
/// only marks phase edges and finally calls [`stop_sampler`].
pub struct SamplerHandle {
    clock: SharedClock,
    stop: Arc<AtomicBool>,
    log: Arc<Mutex<Vec<PowerSample>>>,
    errors: Arc<Mutex<Vec<String>>>,
    open_phases: Mutex<BTreeMap<Metric, u64>>,
    phases: Mutex<Vec<PhaseMark>>,
    thread: Option<JoinHandle<()>>,
    devices: Vec<String>,
    device_names: BTreeMap<String, String>,
    interval_s: f64,
    start_ns: u64,
}

impl SamplerHandle {
    pub fn devices(&self) -> &[String] {
        &self.devices
    }

    pub fn device_names(&self) -> &BTreeMap<String, String> {
        &self.device_names
    }

    pub fn mark_phase_start(&self, metric: Metric) {
        self.phase_start(metric, self.clock.now_ns());
    }

    pub fn mark_phase_end(&self, metric: Metric) {
        self.phase_end(metric, self.clock.now_ns());
    }
}

impl PhaseListener for SamplerHandle {
    fn phase_start(&self, metric: Metric, t_ns: u64) {
        self.open_phases.lock().unwrap().insert(metric, t_ns);
    }

    fn phase_end(&self, metric: Metric, t_ns: u64) {
        if let Some(start) = self.open_phases.lock().unwrap().remove(&metric) {
            self.phases.lock().unwrap().push(PhaseMark {
                metric,
                window: PhaseWindow::new(start, t_ns.max(start)),
            });
        }
    }
}

/// Opens every source (failing on the first unreachable one) and starts sampling all of them
/// every `interval_s` seconds of `clock` time.
pub fn start_sampler(sources: &[PowerSourceDesc], interval_s: f64, clock: SharedClock) -> Result<SamplerHandle> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(Error::Config(format!("power interval must be positive (got {interval_s})")));
    }
    if sources.is_empty() {
        return Err(Error::Config("energy profiling needs at least one power source".into()));
    }
    let mut readers: Vec<Box<dyn PowerReader>> = Vec::with_capacity(sources.len());
    for (i, desc) in sources.iter().enumerate() {
        let reader = open_reader(desc, i)?;
        if readers.iter().any(|r| r.device_id() == reader.device_id()) {
            return Err(Error::Config(format!("power source `{}` given twice", reader.device_id())));
        }
        readers.push(reader);
    }
    let devices: Vec<String> = readers.iter().map(|r| r.device_id().to_string()).collect();
    let device_names = readers
        .iter()
        .filter_map(|r| r.name().map(|n| (r.device_id().to_string(), n)))
        .collect();

    let stop = Arc::new(AtomicBool::new(false));
    let log = Arc::new(Mutex::new(Vec::new()));
    let errors = Arc::new(Mutex::new(Vec::new()));
    let interval_ns = (interval_s * 1e9).round().max(1.0) as u64;
    let start_ns = clock.now_ns();

    let thread = {
        let (clock, stop, log, errors) = (clock.clone(), stop.clone(), log.clone(), errors.clone());
        std::thread::Builder::new()
            .name("elana-power".into())
            .spawn(move || {
                let mut tick: u64 = 0;
                loop {
                    let target = start_ns + tick * interval_ns;
                    if !clock.wait_until(target, &stop) {
                        break;
                    }
                    // virtual time is exact; real time is stamped when the read happens
                    let t_ns = if clock.is_virtual() { target } else { clock.now_ns() };
                    let t_s = (t_ns - start_ns) as f64 / 1e9;
                    let mut batch = Vec::with_capacity(readers.len());
                    for r in readers.iter_mut() {
                        match r.read_watts(t_s) {
                            Ok(watts) if watts.is_finite() && watts >= 0.0 => batch.push(PowerSample {
                                t_ns,
                                device_id: r.device_id().to_string(),
                                watts,
                            }),
                            Ok(watts) => errors.lock().unwrap().push(format!("{}: bad reading {watts}", r.device_id())),
                            Err(e) => errors.lock().unwrap().push(format!("{}: {e}", r.device_id())),
                        }
                    }
                    log.lock().unwrap().extend(batch);
                    tick += 1;
                    if !clock.is_virtual() {
                        // skip ticks missed while stalled instead of bursting
                        let behind = (clock.now_ns().saturating_sub(start_ns)) / interval_ns;
                        tick = tick.max(behind + 1);
                    }
                }
            })
            .map_err(|e| Error::Measurement(format!("cannot start power sampler thread: {e}")))?
    };

    Ok(SamplerHandle {
        clock,
        stop,
        log,
        errors,
        open_phases: Mutex::new(BTreeMap::new()),
        phases: Mutex::new(Vec::new()),
        thread: Some(thread),
        devices,
        device_names,
        interval_s,
        start_ns,
    })
}

/// Halts sampling and returns the complete trace.
pub fn stop_sampler(mut handle: SamplerHandle) -> Result<PowerTrace> {
    let end_ns = handle.clock.now_ns();
    handle.stop.store(true, Ordering::Release);
    handle.clock.wake();
    if let Some(t) = handle.thread.take() {
        t.join()
            .map_err(|_| Error::Measurement("power sampler thread panicked".into()))?;
    }
    let samples = std::mem::take(&mut *handle.log.lock().unwrap());
    let read_errors = std::mem::take(&mut *handle.errors.lock().unwrap());
    let phases = std::mem::take(&mut *handle.phases.lock().unwrap());
    Ok(PowerTrace {
        interval_s: handle.interval_s,
        start_ns: handle.start_ns,
        end_ns,
        devices: std::mem::take(&mut handle.devices),
        device_names: std::mem::take(&mut handle.device_names),
        samples,
        phases,
        read_errors,
    })
}

impl Drop for SamplerHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::Release);
            self.clock.wake();
            let _ = t.join();
        }
    }
}
