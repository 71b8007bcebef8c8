//! Wall-clock abstraction and the time-scale knob for protocol timings.

use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock whose `sleep` advances virtual time instantly.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self { now: Mutex::new(start) }
    }

    pub fn advance(&self, d: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += chrono::Duration::from_std(d).expect("duration in range");
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new(DateTime::parse_from_rfc3339("2026-01-01T00:00:00Z").unwrap().into())
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Nominal protocol timings. Every duration is divided by `scale` before use,
/// so `scale = 20` runs the 90 s probe window in 4.5 s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    pub scale: f64,
    pub swap_poll: Duration,
    pub probe_window: Duration,
    pub probe_interval: Duration,
    pub heartbeat_freshness: Duration,
    pub heartbeat_refresh: Duration,
    pub required_passes: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            scale: 1.0,
            swap_poll: Duration::from_secs(2),
            probe_window: Duration::from_secs(90),
            probe_interval: Duration::from_secs(5),
            heartbeat_freshness: Duration::from_secs(30),
            heartbeat_refresh: Duration::from_secs(10),
            required_passes: 3,
        }
    }
}

impl Timing {
    pub fn scaled(scale: f64) -> Self {
        Self { scale, ..Self::default() }
    }

    pub fn real(&self, nominal: Duration) -> Duration {
        if self.scale <= 0.0 || (self.scale - 1.0).abs() < f64::EPSILON {
            nominal
        } else {
            nominal.div_f64(self.scale)
        }
    }

    /// Samples at t = 0, interval, ... strictly inside the window: 18 for 90 s / 5 s.
    pub fn probe_samples(&self) -> usize {
        let interval = self.probe_interval.as_millis().max(1);
        (self.probe_window.as_millis().div_ceil(interval)) as usize
    }
}
