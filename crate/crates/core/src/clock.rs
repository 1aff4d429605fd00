use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Source of timestamps, in seconds.
///
/// Implementations must never return a value smaller than one they returned
/// before.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Wall clock, seconds since the Unix epoch.
#[derive(Debug, Default)]
pub struct SystemClock {
    last: AtomicU64,
}

impl SystemClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        // Non-negative finite f64 bit patterns sort like the values they encode.
        let prev = self.last.fetch_max(t.to_bits(), Ordering::AcqRel);
        f64::from_bits(prev.max(t.to_bits()))
    }
}

/// A clock that only moves when told to. Used by tests and the simulators.
#[derive(Debug, Default)]
pub struct ManualClock {
    bits: AtomicU64,
}

impl ManualClock {
    pub fn new(start: f64) -> Self {
        assert!(start.is_finite() && start >= 0.0, "clock start must be a non-negative finite time");
        Self {
            bits: AtomicU64::new(start.to_bits()),
        }
    }

    /// Moves the clock to `t`. Earlier times are ignored so reads stay monotone.
    pub fn set(&self, t: f64) {
        assert!(t.is_finite() && t >= 0.0, "clock time must be a non-negative finite time");
        self.bits.fetch_max(t.to_bits(), Ordering::AcqRel);
    }

    pub fn advance(&self, dt: f64) {
        assert!(dt >= 0.0, "cannot move a clock backwards");
        let _ = self
            .bits
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |b| Some((f64::from_bits(b) + dt).to_bits()));
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Acquire))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_ignores_backwards_set() {
        let clock = ManualClock::new(10.0);
        clock.set(5.0);
        assert_eq!(clock.now(), 10.0);
        clock.set(12.5);
        clock.advance(0.5);
        assert_eq!(clock.now(), 13.0);
    }

    #[test]
    fn system_clock_is_monotone() {
        let clock = SystemClock::new();
        let mut prev = clock.now();
        for _ in 0..1000 {
            let t = clock.now();
            assert!(t >= prev);
            prev = t;
        }
    }
}
