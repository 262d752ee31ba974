//! Clock abstraction for timing measurements.

use std::cell::Cell;
use std::time::{Duration, Instant};

/// A monotonic time source. `now` returns the time elapsed since an
/// arbitrary fixed origin and never decreases.
pub trait Clock {
    fn now(&self) -> Duration;

    fn seconds_since(&self, start: Duration) -> f64 {
        self.now().saturating_sub(start).as_secs_f64()
    }
}

/// Wall-time clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// A manually driven clock for tests: time only moves when [`advance`] is
/// called.
///
/// [`advance`]: FakeClock::advance
#[derive(Debug, Default)]
pub struct FakeClock {
    now: Cell<Duration>,
}

impl FakeClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.now.set(self.now.get() + d);
    }

    /// Moves the clock backwards, modelling a wall-clock adjustment.
    /// Durations measured through [`Clock::seconds_since`] saturate at zero.
    pub fn rewind(&self, d: Duration) {
        self.now.set(self.now.get().saturating_sub(d));
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.now.get()
    }
}

/// A deterministic clock that advances by a fixed tick on every reading.
///
/// Used for reproducible pipeline replays: all derived rates depend only on
/// how many times the clock was read, never on the host.
#[derive(Debug)]
pub struct TickClock {
    tick: Duration,
    now: Cell<Duration>,
}

impl TickClock {
    pub fn new(tick: Duration) -> Self {
        Self {
            tick,
            now: Cell::new(Duration::ZERO),
        }
    }
}

impl Clock for TickClock {
    fn now(&self) -> Duration {
        let t = self.now.get() + self.tick;
        self.now.set(t);
        t
    }
}
