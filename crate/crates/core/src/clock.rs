//! Time sources.
//!
//! The pilot never reads wall time directly: every wait goes through a
//! [`Clock`] so the simulator can substitute virtual time.

use std::cell::Cell;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub trait Clock {
    /// Monotonic time since the clock's origin.
    fn now(&self) -> Duration;
    /// Seconds since the unix epoch.
    fn epoch_seconds(&self) -> u64;
    fn sleep(&self, d: Duration);
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now(&self) -> Duration {
        (**self).now()
    }
    fn epoch_seconds(&self) -> u64 {
        (**self).epoch_seconds()
    }
    fn sleep(&self, d: Duration) {
        (**self).sleep(d)
    }
}

impl<C: Clock + ?Sized> Clock for std::rc::Rc<C> {
    fn now(&self) -> Duration {
        (**self).now()
    }
    fn epoch_seconds(&self) -> u64 {
        (**self).epoch_seconds()
    }
    fn sleep(&self, d: Duration) {
        (**self).sleep(d)
    }
}

impl<C: Clock + ?Sized> Clock for std::sync::Arc<C> {
    fn now(&self) -> Duration {
        (**self).now()
    }
    fn epoch_seconds(&self) -> u64 {
        (**self).epoch_seconds()
    }
    fn sleep(&self, d: Duration) {
        (**self).sleep(d)
    }
}

#[derive(Debug, Clone)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn epoch_seconds(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// A clock that only moves when slept on or explicitly advanced.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Cell<Duration>,
    epoch_base: u64,
}

impl ManualClock {
    pub fn new(epoch_base: u64) -> Self {
        Self {
            now: Cell::new(Duration::ZERO),
            epoch_base,
        }
    }

    pub fn advance(&self, d: Duration) {
        self.now.set(self.now.get() + d);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.now.get()
    }

    fn epoch_seconds(&self) -> u64 {
        self.epoch_base + self.now.get().as_secs()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }
}

/// Bounded exponential backoff: 1 s initial, doubling, capped at 30 s,
/// at most 5 attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub factor: u32,
    pub cap: Duration,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_secs(1),
            factor: 2,
            cap: Duration::from_secs(30),
            max_attempts: 5,
        }
    }
}

impl Backoff {
    /// Delay before retry number `attempt` (1-based: the delay after the
    /// first failure is `delay(1)`).
    pub fn delay(&self, attempt: u32) -> Duration {
        let mut d = self.initial;
        for _ in 1..attempt {
            d = (d * self.factor).min(self.cap);
        }
        d.min(self.cap)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. Returns the last error in the latter cases.
    pub fn retry<T, E>(
        &self,
        clock: &dyn Clock,
        mut is_transient: impl FnMut(&E) -> bool,
        mut op: impl FnMut() -> Result<T, E>,
    ) -> Result<T, E> {
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_attempts && is_transient(&e) => {
                    clock.sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let delays: Vec<u64> = (1..=7).map(|a| b.delay(a).as_secs()).collect();
        assert_eq!(delays, vec![1, 2, 4, 8, 16, 30, 30]);
    }

    #[test]
    fn retry_gives_up_after_five_attempts() {
        let clock = ManualClock::new(0);
        let mut calls = 0;
        let res: Result<(), &str> = Backoff::default().retry(&clock, |_| true, || {
            calls += 1;
            Err("down")
        });
        assert_eq!(res, Err("down"));
        assert_eq!(calls, 5);
        // 1 + 2 + 4 + 8 seconds slept between five attempts
        assert_eq!(clock.now(), Duration::from_secs(15));
    }

    #[test]
    fn retry_stops_on_permanent_error() {
        let clock = ManualClock::new(0);
        let mut calls = 0;
        let res: Result<(), &str> = Backoff::default().retry(&clock, |e| *e != "forbidden", || {
            calls += 1;
            Err("forbidden")
        });
        assert!(res.is_err());
        assert_eq!(calls, 1);
        assert_eq!(clock.now(), Duration::ZERO);
    }

    #[test]
    fn manual_clock_epoch() {
        let clock = ManualClock::new(1_000);
        clock.sleep(Duration::from_millis(2_500));
        assert_eq!(clock.epoch_seconds(), 1_002);
    }
}
