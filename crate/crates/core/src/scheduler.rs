//! Periodic timers with absolute deadlines.
//!
//! A running timer fires tick `k` at `origin + k * interval`, where `origin`
//! is the start instant plus the start delay. Deadlines never depend on when
//! earlier callbacks actually ran, so lateness does not accumulate into drift.
//!
//! On the wall clock each timer owns a timing thread, which sleeps until the
//! next deadline, and a worker thread, which runs the callback. If the
//! previous callback is still running when a deadline arrives, that tick is
//! skipped and counted as an overrun; a callback never runs re-entrantly.
//!
//! On the virtual clock nothing runs until [`Scheduler::advance_to`] is
//! called. Due ticks are then fired in deadline order on the calling thread,
//! ties going to the timer that was started first.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::clock::{nanos_to_secs, Clock};
use crate::jitter::TickLog;

const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("timer interval must be a positive finite number of seconds, got {0}")]
    InvalidInterval(f64),
    #[error("start delay must be a non-negative finite number of seconds, got {0}")]
    InvalidDelay(f64),
    #[error("timer {name}: cannot {op} while {state}")]
    IllegalTransition { name: String, op: TimerOp, state: TimerState },
    #[error("timer {0} has been deleted")]
    Deleted(String),
    #[error("operation requires the virtual clock")]
    NotVirtual,
    #[error("failed to spawn timer thread: {0}")]
    Spawn(#[from] std::io::Error),
}

/// A positive timer period at nanosecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Interval {
    nanos: u64,
}

impl Interval {
    /// Rounds to the nearest nanosecond.
    pub fn from_secs_f64(secs: f64) -> Result<Self, SchedulerError> {
        if !secs.is_finite() || secs <= 0.0 || secs > 1e9 {
            return Err(SchedulerError::InvalidInterval(secs));
        }
        let nanos = (secs * NANOS_PER_SEC as f64).round() as u64;
        if nanos == 0 {
            return Err(SchedulerError::InvalidInterval(secs));
        }
        Ok(Interval { nanos })
    }

    pub fn from_nanos(nanos: u64) -> Result<Self, SchedulerError> {
        if nanos == 0 {
            return Err(SchedulerError::InvalidInterval(0.0));
        }
        Ok(Interval { nanos })
    }

    pub fn as_nanos(self) -> u64 {
        self.nanos
    }

    pub fn as_secs_f64(self) -> f64 {
        nanos_to_secs(self.nanos)
    }

    /// Whole-second part.
    pub fn secs(self) -> u64 {
        self.nanos / NANOS_PER_SEC
    }

    /// Fractional part in nanoseconds.
    pub fn subsec_nanos(self) -> u32 {
        (self.nanos % NANOS_PER_SEC) as u32
    }

    pub fn as_duration(self) -> Duration {
        Duration::from_nanos(self.nanos)
    }
}

#[derive(Debug, Clone)]
pub struct TimerSpec {
    pub name: String,
    pub interval: Interval,
    /// Delay from start to the first tick. Defaults to 1 ns.
    pub start_delay_nanos: u64,
    pub log_ticks: bool,
}

impl TimerSpec {
    pub fn new(name: impl Into<String>, interval_secs: f64) -> Result<Self, SchedulerError> {
        Ok(TimerSpec {
            name: name.into(),
            interval: Interval::from_secs_f64(interval_secs)?,
            start_delay_nanos: 1,
            log_ticks: false,
        })
    }

    pub fn with_start_delay(mut self, secs: f64) -> Result<Self, SchedulerError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(SchedulerError::InvalidDelay(secs));
        }
        self.start_delay_nanos = (secs * NANOS_PER_SEC as f64).round() as u64;
        Ok(self)
    }

    pub fn with_tick_log(mut self) -> Self {
        self.log_ticks = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimerState {
    Created,
    Running,
    Stopped,
    Deleted,
}

impl fmt::Display for TimerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TimerState::Created => "created",
            TimerState::Running => "running",
            TimerState::Stopped => "stopped",
            TimerState::Deleted => "deleted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimerOp {
    Start,
    Stop,
    Delete,
}

impl fmt::Display for TimerOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimerOp::Start => "start",
            TimerOp::Stop => "stop",
            TimerOp::Delete => "delete",
        })
    }
}

impl TimerState {
    /// The lifecycle table. `None` marks an illegal transition.
    pub fn after(self, op: TimerOp) -> Option<TimerState> {
        use TimerOp::*;
        use TimerState::*;
        match (self, op) {
            (Deleted, _) => None,
            (_, Delete) => Some(Deleted),
            (Created | Stopped, Start) => Some(Running),
            (Running, Stop) => Some(Stopped),
            _ => None,
        }
    }
}

/// Passed to every callback invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    /// Grid index since the last start.
    pub index: u64,
    /// Deadline on the scheduler clock, seconds.
    pub scheduled: f64,
    /// Instant the callback was entered, seconds.
    pub actual: f64,
}

type Callback = Box<dyn FnMut(Tick) + Send>;

struct Dispatch {
    generation: u64,
    index: u64,
    scheduled_ns: u64,
}

struct Control {
    state: TimerState,
    generation: u64,
    origin_ns: u64,
    next_index: u64,
    start_order: u64,
    busy: bool,
    timing: Option<JoinHandle<()>>,
    worker: Option<mpsc::Sender<Dispatch>>,
}

struct Core {
    id: u64,
    spec: TimerSpec,
    clock: Clock,
    ctl: Mutex<Control>,
    wake: Condvar,
    callback: Mutex<Callback>,
    ticks: Option<Mutex<Vec<f64>>>,
    overruns: AtomicU64,
}

impl Core {
    fn deadline_ns(&self, ctl: &Control) -> u64 {
        ctl.origin_ns + ctl.next_index * self.spec.interval.nanos
    }

    /// Runs the callback for one tick unless the timer stopped meanwhile.
    fn invoke(&self, generation: u64, index: u64, scheduled_ns: u64) {
        let mut callback = {
            let mut ctl = self.ctl.lock().unwrap();
            if ctl.state != TimerState::Running || ctl.generation != generation {
                if self.clock.wall_origin().is_some() {
                    ctl.busy = false;
                }
                return;
            }
            // Taking the callback lock under `ctl` means a concurrent stop()
            // either sees this tick as in flight or prevents it entirely.
            self.callback.lock().unwrap()
        };
        let actual = self.clock.now_secs();
        if let Some(ticks) = &self.ticks {
            ticks.lock().unwrap().push(actual);
        }
        (callback)(Tick { index, scheduled: nanos_to_secs(scheduled_ns), actual });
        drop(callback);
        if self.clock.wall_origin().is_some() {
            self.ctl.lock().unwrap().busy = false;
        }
    }
}

fn timing_loop(core: Arc<Core>, generation: u64) {
    let origin = core.clock.wall_origin().expect("wall clock");
    let mut ctl = core.ctl.lock().unwrap();
    loop {
        if ctl.generation != generation || ctl.state != TimerState::Running {
            return;
        }
        let deadline_ns = core.deadline_ns(&ctl);
        let deadline = origin + Duration::from_nanos(deadline_ns);
        let now = Instant::now();
        if now < deadline {
            ctl = core.wake.wait_timeout(ctl, deadline - now).unwrap().0;
            continue;
        }
        let index = ctl.next_index;
        ctl.next_index += 1;
        if ctl.busy {
            core.overruns.fetch_add(1, Ordering::Relaxed);
            log::debug!("timer {}: tick {index} skipped, callback still running", core.spec.name);
            continue;
        }
        let Some(worker) = ctl.worker.clone() else { return };
        ctl.busy = true;
        if worker.send(Dispatch { generation, index, scheduled_ns: deadline_ns }).is_err() {
            return;
        }
    }
}

fn worker_loop(core: Arc<Core>, rx: mpsc::Receiver<Dispatch>) {
    while let Ok(d) = rx.recv() {
        core.invoke(d.generation, d.index, d.scheduled_ns);
    }
}

#[derive(Default)]
struct Shared {
    timers: Mutex<Vec<Arc<Core>>>,
    next_id: AtomicU64,
    next_order: AtomicU64,
    advancing: Mutex<()>,
}

/// Creates timers on a common clock.
pub struct Scheduler {
    clock: Clock,
    shared: Arc<Shared>,
}

impl Scheduler {
    pub fn new(clock: Clock) -> Self {
        Scheduler { clock, shared: Arc::default() }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn create_timer(
        &self,
        spec: TimerSpec,
        callback: impl FnMut(Tick) + Send + 'static,
    ) -> Result<TimerHandle, SchedulerError> {
        let core = Arc::new(Core {
            id: self.shared.next_id.fetch_add(1, Ordering::Relaxed),
            ticks: spec.log_ticks.then(|| Mutex::new(Vec::new())),
            spec,
            clock: self.clock.clone(),
            ctl: Mutex::new(Control {
                state: TimerState::Created,
                generation: 0,
                origin_ns: 0,
                next_index: 0,
                start_order: 0,
                busy: false,
                timing: None,
                worker: None,
            }),
            wake: Condvar::new(),
            callback: Mutex::new(Box::new(callback)),
            overruns: AtomicU64::new(0),
        });
        if !self.clock.is_virtual() {
            let (tx, rx) = mpsc::channel();
            let worker_core = core.clone();
            thread::Builder::new()
                .name(format!("timer-{}", core.spec.name))
                .spawn(move || worker_loop(worker_core, rx))?;
            core.ctl.lock().unwrap().worker = Some(tx);
        }
        self.shared.timers.lock().unwrap().push(core.clone());
        Ok(TimerHandle { core, shared: self.shared.clone() })
    }

    /// Starts several timers on one common grid origin.
    pub fn start_group(&self, handles: &[&TimerHandle]) -> Result<(), SchedulerError> {
        for h in handles {
            h.check(TimerOp::Start)?;
        }
        let now = self.clock.now_nanos();
        for h in handles {
            h.start_at(now)?;
        }
        Ok(())
    }

    /// Fires every tick due up to `secs` on the virtual clock, then sets the
    /// clock to `secs`.
    pub fn advance_to(&self, secs: f64) -> Result<(), SchedulerError> {
        if !secs.is_finite() || secs < 0.0 {
            return Err(SchedulerError::InvalidDelay(secs));
        }
        self.advance_to_nanos((secs * NANOS_PER_SEC as f64).round() as u64)
    }

    pub fn advance_by(&self, secs: f64) -> Result<(), SchedulerError> {
        let target = self.clock.now_secs() + secs;
        self.advance_to(target)
    }

    pub fn advance_to_nanos(&self, target: u64) -> Result<(), SchedulerError> {
        if !self.clock.is_virtual() {
            return Err(SchedulerError::NotVirtual);
        }
        let _advancing = self.shared.advancing.lock().unwrap();
        loop {
            let timers = self.shared.timers.lock().unwrap().clone();
            let mut next: Option<(u64, u64, Arc<Core>)> = None;
            for core in timers {
                let (due, order) = {
                    let ctl = core.ctl.lock().unwrap();
                    if ctl.state != TimerState::Running {
                        continue;
                    }
                    (core.deadline_ns(&ctl), ctl.start_order)
                };
                if due > target {
                    continue;
                }
                if next.as_ref().is_none_or(|(d, o, _)| (due, order) < (*d, *o)) {
                    next = Some((due, order, core));
                }
            }
            let Some((due, _, core)) = next else { break };
            self.clock.set_virtual_nanos(due);
            let (generation, index) = {
                let mut ctl = core.ctl.lock().unwrap();
                ctl.next_index += 1;
                (ctl.generation, ctl.next_index - 1)
            };
            core.invoke(generation, index, due);
        }
        self.clock.set_virtual_nanos(target);
        Ok(())
    }

    /// Lets time pass: advances the virtual clock, or sleeps on the wall clock.
    pub fn run_for(&self, secs: f64) -> Result<(), SchedulerError> {
        if self.clock.is_virtual() {
            self.advance_by(secs)
        } else {
            thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
            Ok(())
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        let timers = std::mem::take(&mut *self.shared.timers.lock().unwrap());
        for core in timers {
            let handle = TimerHandle { core, shared: self.shared.clone() };
            let _ = handle.delete();
        }
    }
}

/// Shared handle to one timer. Cloning yields another handle to the same timer.
#[derive(Clone)]
pub struct TimerHandle {
    core: Arc<Core>,
    shared: Arc<Shared>,
}

impl fmt::Debug for TimerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimerHandle")
            .field("id", &self.core.id)
            .field("name", &self.core.spec.name)
            .field("state", &self.state())
            .finish()
    }
}

impl TimerHandle {
    pub fn id(&self) -> u64 {
        self.core.id
    }

    pub fn name(&self) -> &str {
        &self.core.spec.name
    }

    pub fn interval(&self) -> Interval {
        self.core.spec.interval
    }

    pub fn state(&self) -> TimerState {
        self.core.ctl.lock().unwrap().state
    }

    /// Deadline of tick 0 since the last start, seconds on the scheduler
    /// clock. `None` before the first start.
    pub fn origin(&self) -> Option<f64> {
        let ctl = self.core.ctl.lock().unwrap();
        (ctl.generation > 0).then(|| nanos_to_secs(ctl.origin_ns))
    }

    /// Ticks skipped because the previous callback overran.
    pub fn overruns(&self) -> u64 {
        self.core.overruns.load(Ordering::Relaxed)
    }

    /// Snapshot of logged invocation instants, if logging was enabled.
    pub fn tick_log(&self) -> Option<TickLog> {
        self.core.ticks.as_ref().map(|t| TickLog::new(t.lock().unwrap().clone()))
    }

    fn check(&self, op: TimerOp) -> Result<TimerState, SchedulerError> {
        let state = self.state();
        state.after(op).ok_or_else(|| match state {
            TimerState::Deleted => SchedulerError::Deleted(self.core.spec.name.clone()),
            _ => SchedulerError::IllegalTransition { name: self.core.spec.name.clone(), op, state },
        })
    }

    pub fn start(&self) -> Result<(), SchedulerError> {
        self.start_at(self.core.clock.now_nanos())
    }

    fn start_at(&self, now_ns: u64) -> Result<(), SchedulerError> {
        let core = &self.core;
        let mut ctl = core.ctl.lock().unwrap();
        let next = ctl.state.after(TimerOp::Start).ok_or_else(|| match ctl.state {
            TimerState::Deleted => SchedulerError::Deleted(core.spec.name.clone()),
            state => SchedulerError::IllegalTransition { name: core.spec.name.clone(), op: TimerOp::Start, state },
        })?;
        ctl.state = next;
        ctl.generation += 1;
        ctl.origin_ns = now_ns + core.spec.start_delay_nanos;
        ctl.next_index = 0;
        ctl.start_order = self.shared.next_order.fetch_add(1, Ordering::Relaxed);
        if core.clock.wall_origin().is_some() {
            let generation = ctl.generation;
            let timing_core = core.clone();
            let spawned = thread::Builder::new()
                .name(format!("timing-{}", core.spec.name))
                .spawn(move || timing_loop(timing_core, generation));
            match spawned {
                Ok(join) => ctl.timing = Some(join),
                Err(e) => {
                    ctl.state = TimerState::Stopped;
                    return Err(e.into());
                }
            }
        }
        Ok(())
    }

    /// Stops ticking. A callback already running may finish; no new one
    /// starts after this returns.
    pub fn stop(&self) -> Result<(), SchedulerError> {
        let core = &self.core;
        let timing = {
            let mut ctl = core.ctl.lock().unwrap();
            let next = ctl.state.after(TimerOp::Stop).ok_or_else(|| match ctl.state {
                TimerState::Deleted => SchedulerError::Deleted(core.spec.name.clone()),
                state => SchedulerError::IllegalTransition { name: core.spec.name.clone(), op: TimerOp::Stop, state },
            })?;
            ctl.state = next;
            ctl.generation += 1;
            ctl.timing.take()
        };
        core.wake.notify_all();
        if let Some(join) = timing {
            if join.thread().id() != thread::current().id() {
                let _ = join.join();
            }
        }
        Ok(())
    }

    pub fn delete(&self) -> Result<(), SchedulerError> {
        if self.state() == TimerState::Running {
            self.stop()?;
        }
        let mut ctl = self.core.ctl.lock().unwrap();
        if ctl.state == TimerState::Deleted {
            return Err(SchedulerError::Deleted(self.core.spec.name.clone()));
        }
        ctl.state = TimerState::Deleted;
        ctl.worker = None;
        drop(ctl);
        self.shared.timers.lock().unwrap().retain(|c| c.id != self.core.id);
        Ok(())
    }
}
