//! Injectable time sources.
//!
//! Every component that stamps or compares times takes an `Arc<dyn Clock>` so
//! tests and simulations can control time. [`SystemClock`] is anchored to the
//! wall clock once and then advanced by a monotonic [`Instant`], so it never
//! goes backwards. [`SimClock`] is a virtual clock: it can be frozen
//! (manual mode) or let real time flow while supporting jumps over idle
//! periods (compressed mode).

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

pub type SharedClock = Arc<dyn Clock>;

/// Monotonic wall clock.
#[derive(Debug, Clone)]
pub struct SystemClock {
    anchor_wall: Timestamp,
    anchor_mono: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            anchor_wall: Utc::now(),
            anchor_mono: Instant::now(),
        }
    }

    pub fn shared() -> SharedClock {
        Arc::new(Self::new())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        self.anchor_wall + chrono_duration(self.anchor_mono.elapsed())
    }
}

/// Virtual clock.
///
/// In manual mode time only moves through [`SimClock::advance`] and
/// [`SimClock::advance_to`]. In flowing mode real elapsed time is added on
/// top, so work done between jumps is measured at its true cost.
#[derive(Debug)]
pub struct SimClock {
    start: Timestamp,
    offset_micros: AtomicI64,
    flow: Option<Instant>,
}

impl SimClock {
    pub fn manual(start: Timestamp) -> Self {
        Self {
            start,
            offset_micros: AtomicI64::new(0),
            flow: None,
        }
    }

    pub fn flowing(start: Timestamp) -> Self {
        Self {
            start,
            offset_micros: AtomicI64::new(0),
            flow: Some(Instant::now()),
        }
    }

    /// Fixed, arbitrary epoch used by tests and simulations.
    pub fn default_epoch() -> Timestamp {
        Utc.with_ymd_and_hms(2026, 1, 5, 0, 0, 0).unwrap()
    }

    pub fn advance(&self, by: Duration) {
        self.offset_micros
            .fetch_add(by.as_micros() as i64, Ordering::SeqCst);
    }

    /// Jumps forward to `target`. Never moves backwards.
    pub fn advance_to(&self, target: Timestamp) {
        let now = self.now();
        if target > now {
            let delta = (target - now).num_microseconds().unwrap_or(i64::MAX);
            self.offset_micros.fetch_add(delta, Ordering::SeqCst);
        }
    }

    pub fn is_flowing(&self) -> bool {
        self.flow.is_some()
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        let mut micros = self.offset_micros.load(Ordering::SeqCst);
        if let Some(anchor) = self.flow {
            micros += anchor.elapsed().as_micros() as i64;
        }
        self.start + chrono::Duration::microseconds(micros)
    }
}

pub fn chrono_duration(d: Duration) -> chrono::Duration {
    chrono::Duration::from_std(d).unwrap_or(chrono::Duration::MAX)
}

/// Signed difference `later - earlier` in seconds.
pub fn seconds_between(earlier: Timestamp, later: Timestamp) -> f64 {
    let d = later - earlier;
    match d.num_microseconds() {
        Some(us) => us as f64 / 1e6,
        None => d.num_milliseconds() as f64 / 1e3,
    }
}

/// RFC 3339 with microsecond precision, the header and key encoding.
pub fn format_ts(ts: Timestamp) -> String {
    ts.to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

pub fn parse_ts(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}
