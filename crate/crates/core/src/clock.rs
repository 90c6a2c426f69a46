use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::time::{self, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Wall,
    Virtual,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(ClockMode::Wall),
            "virtual" => Ok(ClockMode::Virtual),
            other => Err(format!("unknown clock mode {other:?} (expected wall or virtual)")),
        }
    }
}

enum Inner {
    Wall { origin: Instant },
    Virtual { now_ns: AtomicU64, epoch: Timestamp },
}

/// Time base shared by the scheduler and everything that stamps records.
///
/// The wall clock follows the host. The virtual clock only moves when the
/// scheduler is told to advance it, and its UTC stamps are `epoch + elapsed`,
/// so whole runs are reproducible.
#[derive(Clone)]
pub struct Clock(Arc<Inner>);

/// Default start of virtual UTC time.
pub const VIRTUAL_EPOCH_MICROS: i64 = 1_704_067_200_000_000; // 2024-01-01 00:00:00

impl Clock {
    pub fn wall() -> Self {
        Clock(Arc::new(Inner::Wall { origin: Instant::now() }))
    }

    pub fn virtual_clock() -> Self {
        let epoch = Timestamp::from_unix_micros(VIRTUAL_EPOCH_MICROS).expect("epoch in range");
        Self::virtual_from(epoch)
    }

    pub fn virtual_from(epoch: Timestamp) -> Self {
        Clock(Arc::new(Inner::Virtual { now_ns: AtomicU64::new(0), epoch }))
    }

    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Wall => Self::wall(),
            ClockMode::Virtual => Self::virtual_clock(),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match &*self.0 {
            Inner::Wall { .. } => ClockMode::Wall,
            Inner::Virtual { .. } => ClockMode::Virtual,
        }
    }

    pub fn is_virtual(&self) -> bool {
        self.mode() == ClockMode::Virtual
    }

    /// Nanoseconds since the clock was created.
    pub fn now_nanos(&self) -> u64 {
        match &*self.0 {
            Inner::Wall { origin } => origin.elapsed().as_nanos() as u64,
            Inner::Virtual { now_ns, .. } => now_ns.load(Ordering::Acquire),
        }
    }

    pub fn now_secs(&self) -> f64 {
        nanos_to_secs(self.now_nanos())
    }

    pub fn now_utc(&self) -> Timestamp {
        match &*self.0 {
            Inner::Wall { .. } => time::now_utc(),
            Inner::Virtual { now_ns, epoch } => epoch
                .add_micros((now_ns.load(Ordering::Acquire) / 1_000) as i64)
                .expect("virtual time within timestamp range"),
        }
    }

    pub(crate) fn wall_origin(&self) -> Option<Instant> {
        match &*self.0 {
            Inner::Wall { origin } => Some(*origin),
            Inner::Virtual { .. } => None,
        }
    }

    /// Moves virtual time forward; never backwards. No-op on the wall clock.
    pub(crate) fn set_virtual_nanos(&self, ns: u64) {
        if let Inner::Virtual { now_ns, .. } = &*self.0 {
            now_ns.fetch_max(ns, Ordering::AcqRel);
        }
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Clock({:?}, t={}s)", self.mode(), self.now_secs())
    }
}

pub fn nanos_to_secs(ns: u64) -> f64 {
    ns as f64 / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_stamps_follow_virtual_time() {
        let clock = Clock::virtual_clock();
        assert_eq!(clock.now_utc().to_string(), "2024-01-01 00:00:00.000000");
        clock.set_virtual_nanos(1_500_000_000);
        assert_eq!(clock.now_secs(), 1.5);
        assert_eq!(clock.now_utc().to_string(), "2024-01-01 00:00:01.500000");
        clock.set_virtual_nanos(10);
        assert_eq!(clock.now_nanos(), 1_500_000_000);
    }

    #[test]
    fn wall_clock_moves() {
        let clock = Clock::wall();
        let a = clock.now_nanos();
        std::thread::sleep(std::time::Duration::from_millis(2));
        assert!(clock.now_nanos() > a);
        assert!(!clock.is_virtual());
    }
}
