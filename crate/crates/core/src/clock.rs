//! Monotonic time sources shared by backends, harnesses and the power sampler.
//!
//! [`RealClock`] reads the OS monotonic clock. [`VirtualClock`] only moves when
//! something calls [`Clock::elapse`], which makes simulated runs bit-for-bit
//! reproducible while keeping the sampler's tick schedule meaningful.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

pub type SharedClock = Arc<dyn Clock>;

pub trait Clock: Send + Sync + fmt::Debug {
    /// Nanoseconds since this clock's epoch.
    fn now_ns(&self) -> u64;

    /// Let `dur_ns` of time pass. Real clocks block; virtual clocks advance.
    fn elapse(&self, dur_ns: u64);

    /// Block until the clock reads at least `t_ns`. Returns `false` if `stop` was raised
    /// before that point was reached.
    fn wait_until(&self, t_ns: u64, stop: &AtomicBool) -> bool;

    /// Wake any thread parked in [`Clock::wait_until`] so it can observe `stop`.
    fn wake(&self) {}

    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Debug)]
pub struct RealClock {
    epoch: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
        }
    }

    pub fn shared() -> SharedClock {
        Arc::new(Self::new())
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

// OS sleeps overshoot by tens of microseconds; the tail of every wait is spun.
const SPIN_TAIL: Duration = Duration::from_micros(300);
const POLL_SLICE: Duration = Duration::from_millis(5);

impl Clock for RealClock {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn elapse(&self, dur_ns: u64) {
        let deadline = Instant::now() + Duration::from_nanos(dur_ns);
        loop {
            let now = Instant::now();
            if now >= deadline {
                return;
            }
            let left = deadline - now;
            if left > SPIN_TAIL {
                std::thread::sleep(left - SPIN_TAIL);
            } else {
                std::hint::spin_loop();
            }
        }
    }

    fn wait_until(&self, t_ns: u64, stop: &AtomicBool) -> bool {
        loop {
            let now = self.now_ns();
            if now >= t_ns {
                return true;
            }
            if stop.load(Ordering::Acquire) {
                return false;
            }
            let left = Duration::from_nanos(t_ns - now);
            std::thread::sleep(left.min(POLL_SLICE));
        }
    }
}

/// A clock that advances only through [`Clock::elapse`].
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<u64>,
    moved: Condvar,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedClock {
        Arc::new(Self::new())
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn elapse(&self, dur_ns: u64) {
        let mut now = self.now.lock().unwrap();
        *now += dur_ns;
        self.moved.notify_all();
    }

    fn wait_until(&self, t_ns: u64, stop: &AtomicBool) -> bool {
        let mut now = self.now.lock().unwrap();
        loop {
            if *now >= t_ns {
                return true;
            }
            if stop.load(Ordering::Acquire) {
                return false;
            }
            now = self.moved.wait(now).unwrap();
        }
    }

    fn wake(&self) {
        let _guard = self.now.lock().unwrap();
        self.moved.notify_all();
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

pub fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round().max(0.0) as u64
}

pub fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}
