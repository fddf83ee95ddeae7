//! Fixed-rate scheduling against absolute deadlines, and a stop flag that
//! any thread may raise.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

/// Longest single sleep, so a raised stop flag is noticed promptly.
const SLEEP_SLICE: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Default)]
pub struct StopSignal(Arc<AtomicBool>);

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    /// Sleeps until `deadline` or until stopped. Returns false if stopped.
    pub fn sleep_until(&self, deadline: Instant) -> bool {
        loop {
            if self.is_stopped() {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(SLEEP_SLICE));
        }
    }
}

/// What to do with deadlines that have already passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissPolicy {
    /// Jump to the next deadline in the future; missed ticks never run.
    Skip,
    /// Run every tick, back to back, until caught up.
    CatchUp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    /// Tick number counted from the loop start, including skipped ones.
    pub index: u64,
    pub deadline: Instant,
    /// Deadlines skipped just before this tick.
    pub missed: u64,
    /// How far past its deadline this tick woke.
    pub lateness: Duration,
}

#[derive(Debug, Clone)]
pub struct FixedRateTimer {
    start: Instant,
    period: Duration,
    policy: MissPolicy,
    drift_compensation: bool,
    next_index: u64,
    next_deadline: Instant,
}

impl FixedRateTimer {
    /// First tick is due one period after `start`.
    pub fn new(start: Instant, period: Duration, policy: MissPolicy) -> Self {
        assert!(!period.is_zero(), "timer period must be positive");
        Self {
            start,
            period,
            policy,
            drift_compensation: true,
            next_index: 1,
            next_deadline: start + period,
        }
    }

    pub fn from_rate(rate_hz: f64, policy: MissPolicy) -> Self {
        Self::new(Instant::now(), Duration::from_secs_f64(1.0 / rate_hz), policy)
    }

    /// Without drift compensation each deadline is one period after the
    /// previous wake-up, so lateness accumulates.
    pub fn with_drift_compensation(mut self, on: bool) -> Self {
        self.drift_compensation = on;
        self
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    fn deadline_of(&self, index: u64) -> Instant {
        self.start + self.period.mul_f64(index as f64)
    }

    /// Blocks until the next tick is due. `None` once `stop` is raised.
    pub fn wait(&mut self, stop: &StopSignal) -> Option<Tick> {
        let mut missed = 0;
        if self.policy == MissPolicy::Skip && self.drift_compensation {
            let now = Instant::now();
            if now > self.next_deadline {
                let behind = (now - self.start).as_nanos() / self.period.as_nanos().max(1);
                let due = behind as u64;
                // the most recent passed deadline runs now, earlier ones are dropped
                if due >= self.next_index {
                    missed = due - self.next_index;
                    self.next_index = due;
                    self.next_deadline = self.deadline_of(due);
                }
            }
        }
        if !stop.sleep_until(self.next_deadline) {
            return None;
        }
        let woke = Instant::now();
        let tick = Tick {
            index: self.next_index,
            deadline: self.next_deadline,
            missed,
            lateness: woke.saturating_duration_since(self.next_deadline),
        };
        self.next_index += 1;
        self.next_deadline = if self.drift_compensation {
            self.deadline_of(self.next_index)
        } else {
            woke + self.period
        };
        Some(tick)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_interrupts_wait() {
        let stop = StopSignal::new();
        let mut timer = FixedRateTimer::new(Instant::now(), Duration::from_secs(5), MissPolicy::Skip);
        let s = stop.clone();
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(20));
            s.stop();
        });
        let begun = Instant::now();
        assert!(timer.wait(&stop).is_none());
        assert!(begun.elapsed() < Duration::from_secs(1));
        h.join().unwrap();
    }

    #[test]
    fn skip_policy_drops_missed_deadlines() {
        let stop = StopSignal::new();
        let start = Instant::now() - Duration::from_millis(55);
        let mut timer = FixedRateTimer::new(start, Duration::from_millis(10), MissPolicy::Skip);
        let tick = timer.wait(&stop).unwrap();
        assert!(tick.index >= 5, "{tick:?}");
        assert_eq!(tick.missed, tick.index - 1);
        let next = timer.wait(&stop).unwrap();
        assert_eq!(next.index, tick.index + 1);
    }

    #[test]
    fn catch_up_policy_runs_every_tick() {
        let stop = StopSignal::new();
        let start = Instant::now() - Duration::from_millis(50);
        let mut timer = FixedRateTimer::new(start, Duration::from_millis(10), MissPolicy::CatchUp);
        let indices: Vec<u64> = (0..5).map(|_| timer.wait(&stop).unwrap().index).collect();
        assert_eq!(indices, vec![1, 2, 3, 4, 5]);
    }
}
