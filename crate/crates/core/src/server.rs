//! TCP server co-located with the simulated plant.
//!
//! Per request the server receives one frame of actuator records, writes
//! the values into the plant's held input, copies the current measurements
//! and replies with them, stamped at copy time. Both the write and the copy
//! happen under the plant mutex. One client is served at a time; others
//! wait in the listen backlog.

use std::io;
use std::net::{Ipv4Addr, Ipv6Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

use crate::clock::Clock;
use crate::protocol::{Connection, Frame, ProtocolError, WireRecord};
use crate::record::Record;
use crate::simulator::{PlantState, SharedPlant};

pub const DEFAULT_PORT: u16 = 43051;
/// Pending connections queued by the listener.
pub const BACKLOG: i32 = 3;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("expected {expected} actuator records, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("rejected input: {0}")]
    Input(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Binds a listener with the configured backlog. Port 0 picks a free port.
pub fn bind(addr: SocketAddr) -> Result<TcpListener, ServerError> {
    let fail = |source| ServerError::Bind { addr, source };
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP)).map_err(fail)?;
    socket.set_reuse_address(true).map_err(fail)?;
    socket.bind(&addr.into()).map_err(fail)?;
    socket.listen(BACKLOG).map_err(fail)?;
    Ok(socket.into())
}

pub fn accept_one(listener: &TcpListener) -> io::Result<Connection> {
    let (stream, _) = listener.accept()?;
    Connection::new(stream)
}

/// Applies one request to the plant and builds the reply.
///
/// The input write and the measurement copy share one critical section, and
/// the reply is stamped inside it.
pub fn handle_request(plant: &Mutex<PlantState>, request: &Frame, clock: &Clock) -> Result<Frame, ServerError> {
    let mut state = plant.lock().unwrap();
    let expected = state.dims().n_inputs;
    if request.records.len() != expected {
        return Err(ServerError::InputCount { expected, got: request.records.len() });
    }
    state.set_input(&request.values()).map_err(|e| ServerError::Input(e.to_string()))?;
    let ts = clock.now_utc();
    let status = state.status().clone();
    let records: Vec<WireRecord> = state.y().iter().map(|y| Record::new(ts, status.clone(), *y)).collect();
    Ok(Frame::new(records))
}

/// Why a serve loop ended.
#[derive(Debug)]
pub enum ServeEnd {
    Disconnected,
    /// Bad frame, wrong record count or an i/o failure; the connection was
    /// dropped without a reply.
    Dropped(ServerError),
}

/// Serves one client until it disconnects or misbehaves.
pub fn serve_loop(plant: &Mutex<PlantState>, conn: &mut Connection, clock: &Clock) -> ServeEnd {
    loop {
        let request = match conn.recv() {
            Ok(frame) => frame,
            Err(e) if e.is_disconnect() => {
                log::info!("plant server: Client disconnected");
                return ServeEnd::Disconnected;
            }
            Err(e) => {
                log::warn!("plant server: dropping client: {e}");
                conn.shutdown();
                return ServeEnd::Dropped(e.into());
            }
        };
        let reply = match handle_request(plant, &request, clock) {
            Ok(reply) => reply,
            Err(e) => {
                log::warn!("plant server: dropping client: {e}");
                conn.shutdown();
                return ServeEnd::Dropped(e);
            }
        };
        if let Err(e) = conn.send(&reply) {
            if e.is_disconnect() {
                log::info!("plant server: Client disconnected");
                return ServeEnd::Disconnected;
            }
            log::warn!("plant server: send failed: {e}");
            conn.shutdown();
            return ServeEnd::Dropped(e.into());
        }
    }
}

/// A running server thread: accept, serve until the client leaves, repeat.
pub struct PlantServer {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    current: Arc<Mutex<Option<TcpStream>>>,
    clients: Arc<Mutex<Vec<ServeEnd>>>,
    thread: Option<JoinHandle<()>>,
}

impl PlantServer {
    pub fn spawn(listener: TcpListener, plant: SharedPlant, clock: Clock) -> Result<Self, ServerError> {
        let addr = listener.local_addr()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let current: Arc<Mutex<Option<TcpStream>>> = Arc::default();
        let clients: Arc<Mutex<Vec<ServeEnd>>> = Arc::default();
        let (stop, cur, ends) = (stopping.clone(), current.clone(), clients.clone());
        let thread = thread::Builder::new().name("plant-server".into()).spawn(move || {
            while !stop.load(Ordering::Acquire) {
                let mut conn = match accept_one(&listener) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("plant server: accept failed: {e}");
                        thread::sleep(std::time::Duration::from_millis(50));
                        continue;
                    }
                };
                if stop.load(Ordering::Acquire) {
                    break;
                }
                if let Ok(peer) = conn.peer_addr() {
                    log::info!("plant server: client connected from {peer}");
                }
                *cur.lock().unwrap() = conn.killer().ok();
                let end = serve_loop(&plant, &mut conn, &clock);
                *cur.lock().unwrap() = None;
                ends.lock().unwrap().push(end);
            }
        })?;
        Ok(PlantServer { addr, stopping, current, clients, thread: Some(thread) })
    }

    pub fn bind_and_spawn(addr: SocketAddr, plant: SharedPlant, clock: Clock) -> Result<Self, ServerError> {
        Self::spawn(bind(addr)?, plant, clock)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Forcibly closes the connection being served, if any.
    pub fn kill_client(&self) -> bool {
        match self.current.lock().unwrap().as_ref() {
            Some(stream) => stream.shutdown(std::net::Shutdown::Both).is_ok(),
            None => false,
        }
    }

    /// Number of client sessions that have ended.
    pub fn finished_clients(&self) -> usize {
        self.clients.lock().unwrap().len()
    }

    /// How each finished client session ended, oldest first.
    pub fn take_client_ends(&self) -> Vec<ServeEnd> {
        std::mem::take(&mut *self.clients.lock().unwrap())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.stopping.store(true, Ordering::Release);
        self.kill_client();
        // Wake a blocking accept.
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(match wake {
                SocketAddr::V4(_) => Ipv4Addr::LOCALHOST.into(),
                SocketAddr::V6(_) => Ipv6Addr::LOCALHOST.into(),
            });
        }
        let _ = TcpStream::connect(wake);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PlantServer {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop();
        }
    }
}
