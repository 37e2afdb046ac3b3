//! Time sources.
//!
//! Everything that stamps or times out goes through [`Clock`] so tests can run
//! against a [`SimClock`] and get identical logs on every run.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Milliseconds since the Unix epoch.
pub type Timestamp = u64;

/// 2020-01-01T00:00:00Z, the default origin of simulated time.
pub const SIM_EPOCH: Timestamp = 1_577_836_800_000;

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now(&self) -> Timestamp;
    /// Block (wall clock) or jump forward (simulated clock).
    fn sleep(&self, d: Duration);
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually advanced clock. Time only moves through [`SimClock::advance`] or
/// [`Clock::sleep`].
#[derive(Debug)]
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: AtomicU64::new(start),
        }
    }

    pub fn shared() -> Arc<SimClock> {
        Arc::new(Self::new(SIM_EPOCH))
    }

    pub fn advance(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Default for SimClock {
    fn default() -> Self {
        Self::new(SIM_EPOCH)
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}
