//! Wall and virtual clocks. All instants are milliseconds since the Unix epoch.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    /// Whether time only moves when the driver advances it.
    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Manually advanced clock shared between the broker and simulated services.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

/// Default origin of virtual time (2020-01-01T00:00:00Z).
pub const VIRTUAL_EPOCH_MS: u64 = 1_577_836_800_000;

impl Default for VirtualClock {
    fn default() -> Self {
        VirtualClock::starting_at(VIRTUAL_EPOCH_MS)
    }
}

impl VirtualClock {
    pub fn starting_at(ms: u64) -> Self {
        VirtualClock { now: Arc::new(AtomicU64::new(ms)) }
    }

    pub fn advance_ms(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }

    /// Moves the clock forward to `ms`; never moves it back.
    pub fn advance_to(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

pub fn secs_to_ms(s: f64) -> u64 {
    (s.max(0.0) * 1000.0).round() as u64
}

pub fn ms_to_secs(ms: u64) -> f64 {
    ms as f64 / 1000.0
}
