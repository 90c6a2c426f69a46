//! Control-side client of the plant server.
//!
//! Each bridge tick sends the most recent actuator values, receives the
//! measurements and stores them with the server's timestamps and statuses
//! untouched. A lost connection is re-established on later ticks with
//! exponential backoff measured on the scheduler clock.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::protocol::{Connection, Frame, ProtocolError};
use crate::record::Record;
use crate::server::DEFAULT_PORT;
use crate::store::{SharedData, StoreError, TableKey, ACTUATOR, SENSOR};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot resolve {host}:{port}: {reason}")]
    Resolve { host: String, port: u16, reason: String },
    #[error("plant server {addr} unreachable after {attempts} attempts: {last}")]
    Unreachable { addr: SocketAddr, attempts: u32, last: io::Error },
    #[error("invalid bridge config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub host: String,
    pub port: u16,
    /// Bridge interval in seconds.
    #[serde(rename = "Ts_cl")]
    pub interval: f64,
    pub backoff_initial: f64,
    pub backoff_max: f64,
    /// Startup connection attempts before giving up.
    pub max_attempts: u32,
    pub connect_timeout: f64,
    /// Read timeout for a reply; a late reply counts as a disconnect.
    pub reply_timeout: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            interval: 0.5,
            backoff_initial: 1.0,
            backoff_max: 5.0,
            max_attempts: 5,
            connect_timeout: 1.0,
            reply_timeout: 5.0,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        let positive = [
            ("interval", self.interval),
            ("backoff_initial", self.backoff_initial),
            ("backoff_max", self.backoff_max),
            ("connect_timeout", self.connect_timeout),
            ("reply_timeout", self.reply_timeout),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(BridgeError::Config(format!("{name} = {v} must be > 0")));
            }
        }
        if self.backoff_max < self.backoff_initial {
            return Err(BridgeError::Config("backoff_max must be >= backoff_initial".into()));
        }
        if self.max_attempts == 0 {
            return Err(BridgeError::Config("max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Warns when the bridge is not faster than the controller. Returns
    /// whether the relation holds.
    pub fn check_interval(&self, control_interval: f64) -> bool {
        let ok = self.interval < control_interval;
        if !ok {
            log::warn!(
                "bridge interval {} s is not smaller than the control interval {} s",
                self.interval,
                control_interval
            );
        }
        ok
    }

    pub fn resolve(&self) -> Result<SocketAddr, BridgeError> {
        let fail = |reason: String| BridgeError::Resolve { host: self.host.clone(), port: self.port, reason };
        (self.host.as_str(), self.port)
            .to_socket_addrs()
            .map_err(|e| fail(e.to_string()))?
            .next()
            .ok_or_else(|| fail("no addresses".into()))
    }

    /// Delay before retry `attempt` (1-based): initial, doubled each time,
    /// capped.
    pub fn backoff(&self, attempt: u32) -> f64 {
        let doubled = self.backoff_initial * 2f64.powi(attempt.saturating_sub(1).min(62) as i32);
        doubled.min(self.backoff_max)
    }

    fn open(&self, addr: SocketAddr) -> io::Result<Connection> {
        let conn = Connection::connect(addr, Duration::from_secs_f64(self.connect_timeout))?;
        conn.set_read_timeout(Some(Duration::from_secs_f64(self.reply_timeout)))?;
        Ok(conn)
    }
}

/// Connects at startup, sleeping `backoff(k)` of wall time after failed
/// attempt `k`.
pub fn connect_with_retry(cfg: &BridgeConfig) -> Result<(Connection, u32), BridgeError> {
    cfg.validate()?;
    let addr = cfg.resolve()?;
    let mut attempt = 1;
    loop {
        match cfg.open(addr) {
            Ok(conn) => {
                log::info!("bridge: connected to {addr} on attempt {attempt}");
                return Ok((conn, attempt));
            }
            Err(last) if attempt >= cfg.max_attempts => {
                return Err(BridgeError::Unreachable { addr, attempts: attempt, last });
            }
            Err(e) => {
                let wait = cfg.backoff(attempt);
                log::warn!("bridge: attempt {attempt} to reach {addr} failed ({e}); retrying in {wait} s");
                thread::sleep(Duration::from_secs_f64(wait));
                attempt += 1;
            }
        }
    }
}

/// What a bridge tick did.
#[derive(Debug, Clone, PartialEq)]
pub enum BridgeOutcome {
    Exchanged { u: Vec<f64>, y: Vec<f64> },
    /// Shared data was missing; nothing was sent.
    Skipped(String),
    /// The exchange or a reconnect attempt failed.
    Disconnected(String),
    /// Not connected and the backoff delay has not elapsed.
    Waiting,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BridgeStats {
    pub exchanges: u64,
    pub skipped: u64,
    pub disconnects: u64,
    pub reconnects: u64,
}

/// Lets another thread cut the bridge's current connection.
#[derive(Clone, Default)]
pub struct LinkHandle(Arc<Mutex<Option<TcpStream>>>);

impl LinkHandle {
    /// Shuts the live connection down. Returns false if there was none.
    pub fn sever(&self) -> bool {
        match self.0.lock().unwrap().take() {
            Some(stream) => stream.shutdown(std::net::Shutdown::Both).is_ok(),
            None => false,
        }
    }

    fn set(&self, stream: Option<TcpStream>) {
        *self.0.lock().unwrap() = stream;
    }
}

pub struct Bridge {
    cfg: BridgeConfig,
    addr: SocketAddr,
    clock: Clock,
    conn: Option<Connection>,
    failures: u32,
    next_attempt_ns: u64,
    link: LinkHandle,
    stats: BridgeStats,
}

impl Bridge {
    /// A bridge that connects lazily on its first tick.
    pub fn new(cfg: BridgeConfig, clock: Clock) -> Result<Self, BridgeError> {
        cfg.validate()?;
        let addr = cfg.resolve()?;
        Ok(Bridge { cfg, addr, clock, conn: None, failures: 0, next_attempt_ns: 0, link: LinkHandle::default(), stats: BridgeStats::default() })
    }

    /// A bridge that starts out connected (see [`connect_with_retry`]).
    pub fn connect(cfg: BridgeConfig, clock: Clock) -> Result<Self, BridgeError> {
        let mut bridge = Bridge::new(cfg, clock)?;
        let (conn, _) = connect_with_retry(&bridge.cfg)?;
        bridge.attach(conn);
        Ok(bridge)
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.cfg
    }

    pub fn link(&self) -> LinkHandle {
        self.link.clone()
    }

    pub fn stats(&self) -> BridgeStats {
        self.stats
    }

    pub fn is_connected(&self) -> bool {
        self.conn.is_some()
    }

    fn attach(&mut self, conn: Connection) {
        self.link.set(conn.killer().ok());
        self.conn = Some(conn);
        self.failures = 0;
    }

    fn detach(&mut self, reason: &str) {
        if let Some(conn) = self.conn.take() {
            conn.shutdown();
        }
        self.link.set(None);
        self.stats.disconnects += 1;
        self.schedule_retry(reason);
    }

    fn schedule_retry(&mut self, reason: &str) {
        self.failures += 1;
        let wait = self.cfg.backoff(self.failures);
        self.next_attempt_ns = self.clock.now_nanos() + (wait * 1e9) as u64;
        log::warn!("bridge: {reason}; reconnecting in {wait} s");
    }

    fn ensure_connected(&mut self) -> Result<(), BridgeOutcome> {
        if self.conn.is_some() {
            return Ok(());
        }
        if self.clock.now_nanos() < self.next_attempt_ns {
            return Err(BridgeOutcome::Waiting);
        }
        match self.cfg.open(self.addr) {
            Ok(conn) => {
                log::info!("bridge: reconnected to {}", self.addr);
                self.attach(conn);
                self.stats.reconnects += 1;
                Ok(())
            }
            Err(e) => {
                let reason = format!("reconnect to {} failed: {e}", self.addr);
                self.schedule_retry(&reason);
                Err(BridgeOutcome::Disconnected(reason))
            }
        }
    }

    /// One request/reply exchange.
    pub fn bridge_tick(&mut self, store: &dyn SharedData) -> BridgeOutcome {
        let inputs = store.read_dims().and_then(|dims| Ok((dims, store.read_recent_multi_float(ACTUATOR, dims.n_manip)?)));
        let (dims, actuators) = match inputs {
            Ok(v) => v,
            Err(e) => {
                log::warn!("bridge: tick skipped: {e}");
                self.stats.skipped += 1;
                return BridgeOutcome::Skipped(e.to_string());
            }
        };
        if let Err(outcome) = self.ensure_connected() {
            return outcome;
        }
        let conn = self.conn.as_mut().expect("connected");
        let request = Frame::new(actuators);
        let reply = match conn.exchange(&request) {
            Ok(reply) => reply,
            Err(e) => {
                let reason = describe(&e);
                self.detach(&reason);
                return BridgeOutcome::Disconnected(reason);
            }
        };
        if reply.records.len() != dims.n_meas {
            let reason = format!("expected {} measurements, got {}", dims.n_meas, reply.records.len());
            self.detach(&reason);
            return BridgeOutcome::Disconnected(reason);
        }
        if let Err(e) = store_measurements(store, &reply) {
            log::error!("bridge: storing measurements failed: {e}");
        }
        self.stats.exchanges += 1;
        BridgeOutcome::Exchanged { u: request.values(), y: reply.values() }
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        if let Some(conn) = self.conn.take() {
            conn.shutdown();
        }
    }
}

fn describe(e: &ProtocolError) -> String {
    if e.is_disconnect() {
        "server disconnected".into()
    } else {
        format!("exchange failed: {e}")
    }
}

fn store_measurements(store: &dyn SharedData, reply: &Frame) -> Result<(), StoreError> {
    for (i, r) in reply.records.iter().enumerate() {
        store.insert_float(&TableKey::new(SENSOR, i + 1)?, Record::new(r.ts, r.status.clone(), r.value))?;
    }
    Ok(())
}
