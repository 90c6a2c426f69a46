//! The closed-loop experiment: a first-order plant behind the plant server,
//! a PI controller behind the bridge, and a setpoint sequence, all driven by
//! periodic timers on one clock.
//!
//! Timers are named after the task they drive:
//!
//! | timer  | task                    | default interval |
//! |--------|-------------------------|------------------|
//! | `zbar` | setpoint sequence       | 150 s            |
//! | `p`    | plant simulator         | 0.2 s            |
//! | `cl`   | bridge client           | 0.5 s            |
//! | `c`    | controller              | 2 s              |
//!
//! They share one grid origin and are started in the order above, which is
//! also the firing order at coinciding deadlines under the virtual clock.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{Bridge, BridgeConfig, BridgeError, BridgeStats, LinkHandle};
use crate::clock::{Clock, ClockMode};
use crate::control::{control_tick, ControlError, ControlOutcome, PiLaw, PiState};
use crate::jitter::{jitter_stats, JitterError, JitterSummary, DEFAULT_BIN_WIDTH};
use crate::ode::{FirstOrderModel, OdeError};
use crate::record::Record;
use crate::scheduler::{Scheduler, SchedulerError, TimerHandle, TimerSpec};
use crate::server::{PlantServer, ServerError};
use crate::simulator::{simulator_tick, PlantState, SharedPlant, SimConfig, SimError, SimTrace};
use crate::store::{
    DataStore, DimensionSpec, SharedData, StoreError, TableKey, ACTUATOR, OPMODE, SETPOINT, TUNING_KP, TUNING_TAUI,
    TUNING_UBAR,
};

pub const TIMER_SETPOINT: &str = "zbar";
pub const TIMER_SIMULATOR: &str = "p";
pub const TIMER_BRIDGE: &str = "cl";
pub const TIMER_CONTROL: &str = "c";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("plant server: {0}")]
    Server(#[from] ServerError),
    #[error("bridge: {0}")]
    Bridge(#[from] BridgeError),
    #[error("simulator: {0}")]
    Simulator(#[from] SimError),
    #[error("plant model: {0}")]
    Model(#[from] OdeError),
    #[error("controller: {0}")]
    Control(#[from] ControlError),
    #[error("scheduler: {0}")]
    Scheduler(#[from] SchedulerError),
    #[error("shared data: {0}")]
    Store(#[from] StoreError),
    #[error("jitter: {0}")]
    Jitter(#[from] JitterError),
    #[error("writing {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(rename = "K")]
    pub gain: f64,
    pub tau: f64,
    #[serde(rename = "Ts_p")]
    pub interval: f64,
    #[serde(rename = "N")]
    pub steps: usize,
    pub x0: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig { gain: 10.0, tau: 10.0, interval: 0.2, steps: 10, x0: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "Kp")]
    pub kp: f64,
    pub tau_i: f64,
    pub u_bar: f64,
    #[serde(rename = "Ts_c")]
    pub interval: f64,
    #[serde(rename = "I_bar")]
    pub i_bar: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { kp: 0.2, tau_i: 10.0, u_bar: 0.0, interval: 2.0, i_bar: 0.0 }
    }
}

impl ControllerConfig {
    pub fn pi_state(&self) -> Result<PiState, ControlError> {
        PiState::new(self.kp, self.tau_i, self.u_bar, self.interval, self.i_bar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetpointConfig {
    #[serde(rename = "Ts_zbar")]
    pub interval: f64,
    pub values: Vec<f64>,
}

impl Default for SetpointConfig {
    fn default() -> Self {
        SetpointConfig { interval: 150.0, values: vec![2.0, 4.0, 3.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seconds of clock time to run.
    pub duration: f64,
    pub clock: ClockMode,
    /// Jitter histogram bin width, seconds.
    pub bin_width: f64,
    /// Skip the embedded plant server and simulator; the bridge connects to
    /// a plant server already listening at `bridge.host:bridge.port`.
    pub external_plant: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { duration: 450.0, clock: ClockMode::Wall, bin_width: DEFAULT_BIN_WIDTH, external_plant: false }
    }
}

/// Everything needed to run the experiment. Deserializes from TOML with
/// `[plant]`, `[controller]`, `[bridge]`, `[setpoint]` and `[run]` tables;
/// missing keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub controller: ControllerConfig,
    pub bridge: BridgeConfig,
    pub setpoint: SetpointConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let fail = |message: String| ExperimentError::ConfigFile { path: path.to_owned(), message };
        let text = fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        toml::from_str(&text).map_err(|e| fail(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let intervals = [
            ("plant.Ts_p", self.plant.interval),
            ("controller.Ts_c", self.controller.interval),
            ("setpoint.Ts_zbar", self.setpoint.interval),
        ];
        for (name, v) in intervals {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} = {v} must be > 0"));
            }
        }
        if !(self.run.duration.is_finite() && self.run.duration > 0.0) {
            return bad(format!("run.duration = {} must be > 0", self.run.duration));
        }
        if self.setpoint.values.is_empty() {
            return bad("setpoint.values must not be empty".into());
        }
        if self.setpoint.values.iter().any(|v| !v.is_finite()) {
            return bad("setpoint.values must be finite".into());
        }
        if !self.plant.x0.is_finite() {
            return bad("plant.x0 must be finite".into());
        }
        if !(self.run.bin_width.is_finite() && self.run.bin_width > 0.0) {
            return bad(format!("run.bin_width = {} must be > 0", self.run.bin_width));
        }
        FirstOrderModel::new(self.plant.gain, self.plant.tau)?;
        SimConfig::new(self.plant.interval, self.plant.steps)?;
        self.controller.pi_state()?;
        self.bridge.validate()?;
        if self.run.external_plant {
            if self.run.clock == ClockMode::Virtual {
                return bad("run.external_plant needs the wall clock".into());
            }
            if self.bridge.port == 0 {
                return bad("run.external_plant needs bridge.port".into());
            }
        }
        if self.run.duration < self.setpoint.interval {
            log::warn!("run shorter than one setpoint interval");
        }
        Ok(())
    }
}

/// Setpoint values issued one per tick; past the end the last value holds.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointSchedule {
    values: Vec<f64>,
    issued: usize,
}

impl SetpointSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self, ExperimentError> {
        if values.is_empty() {
            return Err(ExperimentError::Config("setpoint schedule is empty".into()));
        }
        Ok(SetpointSchedule { values, issued: 0 })
    }

    pub fn next_value(&mut self) -> f64 {
        let v = self.values[self.issued.min(self.values.len() - 1)];
        self.issued += 1;
        v
    }
}

/// Writes the next scheduled value to `("setpoint", 1)`.
pub fn setpoint_tick(store: &dyn SharedData, schedule: &mut SetpointSchedule, clock: &Clock) -> Result<f64, StoreError> {
    let v = schedule.next_value();
    store.insert_float(&TableKey::new(SETPOINT, 1)?, Record::ok(clock.now_utc(), v))?;
    Ok(v)
}

/// One applied control tick, as written to `timeseries.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlRow {
    /// Seconds since the grid origin.
    pub t: f64,
    /// Setpoint segment (number of setpoint ticks so far, minus one).
    pub segment: usize,
    pub z_bar: f64,
    pub y: f64,
    pub u: f64,
}

#[derive(Default)]
struct Recording {
    segment: Option<usize>,
    rows: Vec<ControlRow>,
    plant: SimTrace,
    bridge: BridgeStats,
}

/// Read access to the experiment's timers, for jitter reports while the
/// loop runs.
#[derive(Clone, Debug)]
pub struct TimerRegistry {
    timers: Vec<TimerHandle>,
    bin_width: f64,
}

impl TimerRegistry {
    pub fn new(timers: Vec<TimerHandle>, bin_width: f64) -> Self {
        TimerRegistry { timers, bin_width }
    }

    pub fn names(&self) -> Vec<String> {
        self.timers.iter().map(|t| t.name().to_owned()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&TimerHandle> {
        self.timers.iter().find(|t| t.name() == name)
    }

    pub fn report(&self, name: &str) -> Option<TimerReport> {
        self.get(name).map(|t| TimerReport::from_handle(t, self.bin_width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimerReport {
    pub name: String,
    pub interval: f64,
    pub ticks: usize,
    pub overruns: u64,
    /// `t_N - t_1 - (N-1) * interval`.
    pub drift: Option<f64>,
    pub max_grid_deviation: Option<f64>,
    /// `None` until the timer has fired twice.
    pub jitter: Option<JitterSummary>,
}

impl TimerReport {
    pub fn from_handle(timer: &TimerHandle, bin_width: f64) -> Self {
        let interval = timer.interval().as_secs_f64();
        let log = timer.tick_log().unwrap_or_default();
        TimerReport {
            name: timer.name().to_owned(),
            interval,
            ticks: log.len(),
            overruns: timer.overruns(),
            drift: log.cumulative_drift(interval),
            max_grid_deviation: log.max_grid_deviation(interval),
            jitter: jitter_stats(&log, bin_width).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub segment: usize,
    pub z_bar: f64,
    /// The last control tick of the segment.
    pub t_end: f64,
    pub y_end: f64,
    pub u_end: f64,
    /// `|y - z_bar|`.
    pub tracking_error: f64,
    /// `|u - z_bar / K|`.
    pub input_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub clock: ClockMode,
    pub duration: f64,
    /// Spread of the first actual tick instants across timers, seconds.
    pub start_skew: f64,
    pub timers: BTreeMap<String, TimerReport>,
    pub segments: Vec<SegmentReport>,
    pub bridge: BridgeStats,
    #[serde(skip)]
    pub rows: Vec<ControlRow>,
    #[serde(skip)]
    pub plant: SimTrace,
    #[serde(skip)]
    pub tick_logs: BTreeMap<String, crate::jitter::TickLog>,
}

impl Report {
    /// Writes `timeseries.csv`, `plant.csv`, `jitter_<timer>.csv` and
    /// `summary.json` into `dir`, creating it if needed.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), ExperimentError> {
        let fail = |path: &Path, e: &dyn std::fmt::Display| ExperimentError::Artifact { path: path.to_owned(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(|e| fail(dir, &e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(|e| fail(&path, &e))
        };

        let path = dir.join("timeseries.csv");
        let mut out = csv::Writer::from_writer(create("timeseries.csv")?);
        let rows = std::iter::once(["t", "z_bar", "y", "u"].map(String::from))
            .chain(self.rows.iter().map(|r| [r.t, r.z_bar, r.y, r.u].map(|v| v.to_string())));
        for row in rows {
            out.write_record(&row).map_err(|e| fail(&path, &e))?;
        }
        out.flush().map_err(|e| fail(&path, &e))?;

        self.plant.write_csv(create("plant.csv")?).map_err(|e| fail(&dir.join("plant.csv"), &e))?;

        for (name, log) in &self.tick_logs {
            let file = format!("jitter_{name}.csv");
            log.write_csv(create(&file)?).map_err(|e| fail(&dir.join(&file), &e))?;
        }

        let path = dir.join("summary.json");
        let mut out = create("summary.json")?;
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| fail(&path, &e))?;
        out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| fail(&path, &e))?;
        Ok(())
    }
}

/// A running experiment.
pub struct Session {
    cfg: ExperimentConfig,
    clock: Clock,
    scheduler: Scheduler,
    store: Arc<DataStore>,
    plant: Option<SharedPlant>,
    server: Option<PlantServer>,
    link: LinkHandle,
    timers: Vec<TimerHandle>,
    recording: Arc<Mutex<Recording>>,
    origin: f64,
}

impl Session {
    /// Seeds shared data, starts the plant server, connects the bridge and
    /// starts all timers on a common origin.
    pub fn start(cfg: ExperimentConfig, store: Arc<DataStore>) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let clock = Clock::new(cfg.run.clock);
        let scheduler = Scheduler::new(clock.clone());
        let model = FirstOrderModel::new(cfg.plant.gain, cfg.plant.tau)?;
        let sim_cfg = SimConfig::new(cfg.plant.interval, cfg.plant.steps)?;
        let pi = cfg.controller.pi_state()?;

        let ts = clock.now_utc();
        let key = |t: &str| TableKey::new(t, 1);
        store.write_dims(DimensionSpec::SCALAR, ts)?;
        store.insert_int(&key(OPMODE)?, Record::ok(ts, 1))?;
        store.insert_float(&key(ACTUATOR)?, Record::ok(ts, pi.u_bar))?;
        store.insert_float(&key(TUNING_KP)?, Record::ok(ts, pi.kp))?;
        store.insert_float(&key(TUNING_TAUI)?, Record::ok(ts, pi.tau_i))?;
        store.insert_float(&key(TUNING_UBAR)?, Record::ok(ts, pi.u_bar))?;

        let (plant, server, bridge_cfg) = if cfg.run.external_plant {
            (None, None, cfg.bridge.clone())
        } else {
            let plant = PlantState::new(&model, vec![cfg.plant.x0], vec![pi.u_bar])?.shared();
            let server = PlantServer::bind_and_spawn(cfg.bridge.resolve()?, plant.clone(), clock.clone())?;
            let bridge_cfg = BridgeConfig { port: server.local_addr().port(), ..cfg.bridge.clone() };
            (Some(plant), Some(server), bridge_cfg)
        };
        bridge_cfg.check_interval(cfg.controller.interval);
        let mut bridge = Bridge::connect(bridge_cfg, clock.clone())?;
        let link = bridge.link();

        let recording: Arc<Mutex<Recording>> = Arc::default();
        let timer = |name: &str, interval: f64| TimerSpec::new(name, interval).map(TimerSpec::with_tick_log);

        let zbar = {
            let (store, clock, rec) = (store.clone(), clock.clone(), recording.clone());
            let mut schedule = SetpointSchedule::new(cfg.setpoint.values.clone())?;
            scheduler.create_timer(timer(TIMER_SETPOINT, cfg.setpoint.interval)?, move |tick| {
                match setpoint_tick(&*store, &mut schedule, &clock) {
                    Ok(v) => log::info!("setpoint: z_bar = {v}"),
                    Err(e) => log::error!("setpoint: {e}"),
                }
                rec.lock().unwrap().segment = Some(tick.index as usize);
            })?
        };
        let p = match &plant {
            Some(plant) => {
                let (plant, clock, rec) = (plant.clone(), clock.clone(), recording.clone());
                Some(scheduler.create_timer(timer(TIMER_SIMULATOR, cfg.plant.interval)?, move |_| {
                    if let Ok(step) = simulator_tick(&plant, &model, &sim_cfg) {
                        rec.lock().unwrap().plant.push(clock.now_secs(), step);
                    }
                })?)
            }
            None => None,
        };
        let cl = {
            let (store, rec) = (store.clone(), recording.clone());
            scheduler.create_timer(timer(TIMER_BRIDGE, cfg.bridge.interval)?, move |_| {
                bridge.bridge_tick(&*store);
                rec.lock().unwrap().bridge = bridge.stats();
            })?
        };
        let c = {
            let (store, clock, rec) = (store.clone(), clock.clone(), recording.clone());
            let mut law = PiLaw::scalar(pi)?;
            let interval = cfg.controller.interval;
            scheduler.create_timer(timer(TIMER_CONTROL, cfg.controller.interval)?, move |tick| {
                match control_tick(&*store, &mut law, &clock) {
                    Ok(ControlOutcome::Applied { y, z_bar, u }) => {
                        let mut rec = rec.lock().unwrap();
                        let row = ControlRow {
                            t: ((tick.index as f64 * interval + tick.actual - tick.scheduled) * 1e6).round() / 1e6,
                            segment: rec.segment.unwrap_or(0),
                            z_bar: z_bar[0],
                            y: y[0],
                            u: u[0],
                        };
                        rec.rows.push(row);
                    }
                    Ok(_) => {}
                    Err(e) => log::error!("control: {e}"),
                }
            })?
        };

        let timers: Vec<TimerHandle> = [Some(zbar), p, Some(cl), Some(c)].into_iter().flatten().collect();
        let refs: Vec<&TimerHandle> = timers.iter().collect();
        scheduler.start_group(&refs)?;
        let origin = timers[0].origin().expect("started");
        log::info!("experiment started ({:?} clock)", clock.mode());
        Ok(Session { cfg, clock, scheduler, store, plant, server, link, timers, recording, origin })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn store(&self) -> &Arc<DataStore> {
        &self.store
    }

    /// The embedded plant, absent when running against an external server.
    pub fn plant(&self) -> Option<&SharedPlant> {
        self.plant.as_ref()
    }

    /// Cuts the bridge's connection; it reconnects on a later tick.
    pub fn link(&self) -> &LinkHandle {
        &self.link
    }

    pub fn plant_server(&self) -> Option<&PlantServer> {
        self.server.as_ref()
    }

    pub fn registry(&self) -> TimerRegistry {
        TimerRegistry::new(self.timers.clone(), self.cfg.run.bin_width)
    }

    /// Seconds elapsed since the grid origin.
    pub fn elapsed(&self) -> f64 {
        self.clock.now_secs() - self.origin
    }

    /// Lets the loop run until `t` seconds after the grid origin. Ticks due
    /// exactly at `t` do not fire.
    pub fn run_until(&self, t: f64) -> Result<(), ExperimentError> {
        let target = self.origin + t;
        if self.clock.is_virtual() {
            let ns = (target * 1e9).round() as u64;
            self.scheduler.advance_to_nanos(ns.saturating_sub(1).max(self.clock.now_nanos()))?;
        } else {
            loop {
                let left = target - self.clock.now_secs();
                if left <= 0.0 {
                    break;
                }
                thread::sleep(Duration::from_secs_f64(left.min(0.25)));
            }
        }
        Ok(())
    }

    /// Stops the timers (setpoint, control, bridge, simulator), closes the
    /// plant server and summarizes the run.
    pub fn finish(mut self) -> Result<Report, ExperimentError> {
        for name in [TIMER_SETPOINT, TIMER_CONTROL, TIMER_BRIDGE, TIMER_SIMULATOR] {
            if let Some(t) = self.timers.iter().find(|t| t.name() == name) {
                t.stop()?;
            }
        }
        // Deleting the bridge timer drops its callback and with it the
        // bridge connection.
        for t in &self.timers {
            t.delete()?;
        }
        if let Some(server) = self.server.take() {
            server.shutdown();
        }
        let rec = std::mem::take(&mut *self.recording.lock().unwrap());
        let bin_width = self.cfg.run.bin_width;
        let mut timers = BTreeMap::new();
        let mut tick_logs = BTreeMap::new();
        let mut firsts = Vec::new();
        for t in &self.timers {
            timers.insert(t.name().to_owned(), TimerReport::from_handle(t, bin_width));
            let log = t.tick_log().unwrap_or_default();
            firsts.extend(log.instants.first().copied());
            tick_logs.insert(t.name().to_owned(), log);
        }
        let start_skew = match (firsts.iter().copied().reduce(f64::min), firsts.iter().copied().reduce(f64::max)) {
            (Some(lo), Some(hi)) => hi - lo,
            _ => 0.0,
        };
        Ok(Report {
            clock: self.clock.mode(),
            duration: self.elapsed(),
            start_skew,
            timers,
            segments: segment_ends(&rec.rows, self.cfg.plant.gain),
            bridge: rec.bridge,
            rows: rec.rows,
            plant: rec.plant,
            tick_logs,
        })
    }
}

/// The last control row of each setpoint segment.
pub fn segment_ends(rows: &[ControlRow], gain: f64) -> Vec<SegmentReport> {
    let mut ends: BTreeMap<usize, &ControlRow> = BTreeMap::new();
    for r in rows {
        ends.insert(r.segment, r);
    }
    ends.into_values()
        .map(|r| SegmentReport {
            segment: r.segment,
            z_bar: r.z_bar,
            t_end: r.t,
            y_end: r.y,
            u_end: r.u,
            tracking_error: (r.y - r.z_bar).abs(),
            input_error: (r.u - r.z_bar / gain).abs(),
        })
        .collect()
}

/// Runs the experiment for its configured duration and writes artifacts to
/// `out` when given.
pub fn run_experiment(cfg: ExperimentConfig, out: Option<&Path>) -> Result<Report, ExperimentError> {
    let duration = cfg.run.duration;
    let session = Session::start(cfg, Arc::new(DataStore::new()))?;
    session.run_until(duration)?;
    let report = session.finish()?;
    if let Some(dir) = out {
        report.write_artifacts(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(clock: ClockMode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.bridge.port = 0;
        cfg.run.clock = clock;
        cfg
    }

    #[test]
    fn schedule_holds_last_value() {
        let clock = Clock::virtual_clock();
        let store = DataStore::new();
        let mut s = SetpointSchedule::new(vec![2.0, 4.0, 3.0]).unwrap();
        for _ in 0..4 {
            setpoint_tick(&store, &mut s, &clock).unwrap();
        }
        let values: Vec<f64> = store.history(&TableKey::new(SETPOINT, 1).unwrap()).unwrap().iter().map(|r| r.value).collect();
        assert_eq!(values, vec![2.0, 4.0, 3.0, 3.0]);
        assert!(SetpointSchedule::new(vec![]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("Ts_p = 0.2"), "{text}");
        assert!(text.contains("Kp = 0.2"), "{text}");
        assert!(text.contains("Ts_cl = 0.5"), "{text}");
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("[run]\nduration = 10.0\nclock = \"virtual\"\n").unwrap();
        assert_eq!(partial.run.duration, 10.0);
        assert_eq!(partial.plant, PlantConfig::default());
        assert!(ExperimentConfig::from_toml("[plant]\nbogus = 1\n").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = quick(ClockMode::Virtual);
        cfg.run.duration = 0.0;
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
        let mut cfg = quick(ClockMode::Virtual);
        cfg.setpoint.values.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = quick(ClockMode::Virtual);
        cfg.controller.tau_i = -1.0;
        assert!(matches!(cfg.validate(), Err(ExperimentError::Control(_))));
        let mut cfg = quick(ClockMode::Virtual);
        cfg.run.external_plant = true;
        assert!(cfg.validate().is_err());
        cfg.run.clock = ClockMode::Wall;
        assert!(cfg.validate().is_err(), "port 0");
        assert!(run_experiment(ExperimentConfig { run: RunConfig { duration: 0.0, ..Default::default() }, ..quick(ClockMode::Virtual) }, None).is_err());
    }

    #[test]
    fn short_virtual_run() {
        let mut cfg = quick(ClockMode::Virtual);
        cfg.run.duration = 10.0;
        let report = run_experiment(cfg, None).unwrap();
        // Ticks at 0, 2, 4, 6, 8 (10 is past the end by the start delay).
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(report.timers["p"].ticks, 50);
        assert_eq!(report.timers["cl"].ticks, 20);
        assert_eq!(report.timers["zbar"].ticks, 1);
        assert_eq!(report.start_skew, 0.0);
        assert_eq!(report.bridge.exchanges, 20);
        assert_eq!(report.segments.len(), 1);
        assert_eq!(report.rows[0].u, 0.2 * 2.0);
    }

    #[test]
    fn artifacts_are_written() {
        let mut cfg = quick(ClockMode::Virtual);
        cfg.run.duration = 5.0;
        let dir = tempfile::tempdir().unwrap();
        run_experiment(cfg, Some(dir.path())).unwrap();
        let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert!(ts.starts_with("t,z_bar,y,u\n"));
        for name in ["p", "c", "cl", "zbar"] {
            let j = fs::read_to_string(dir.path().join(format!("jitter_{name}.csv"))).unwrap();
            assert!(j.starts_with("k,t_k,dt_k\n"), "{name}");
        }
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["timers"]["p"]["ticks"], 25);
        assert!(fs::read_to_string(dir.path().join("plant.csv")).unwrap().starts_with("t,x1,u1,y1\n"));
    }
}
