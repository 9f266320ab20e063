//! Time sources shared by the broker, the scheduler and the harness.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Source of the current time in microseconds.
pub trait Clock: Send + Sync {
    fn now_us(&self) -> u64;

    fn now_s(&self) -> f64 {
        self.now_us() as f64 / 1e6
    }
}

/// Wall clock, microseconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_us(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0)
    }
}

/// Manually advanced clock. Clones share the same time.
#[derive(Debug, Default, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new(start_us: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_us)),
        }
    }

    pub fn set_us(&self, t: u64) {
        self.now.store(t, Ordering::SeqCst);
    }

    pub fn advance_us(&self, dt: u64) -> u64 {
        self.now.fetch_add(dt, Ordering::SeqCst) + dt
    }

    pub fn advance_s(&self, dt: f64) -> u64 {
        self.advance_us((dt * 1e6).round() as u64)
    }
}

impl Clock for VirtualClock {
    fn now_us(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_clones_share_time() {
        let a = VirtualClock::new(10);
        let b = a.clone();
        a.advance_us(5);
        assert_eq!(b.now_us(), 15);
        b.advance_s(0.5);
        assert_eq!(a.now_us(), 500_015);
        assert!((a.now_s() - 0.500015).abs() < 1e-12);
    }
}
