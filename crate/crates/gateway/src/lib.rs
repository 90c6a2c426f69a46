//! Remote monitoring and command surface over shared data.
//!
//! | method | path                              | purpose                              |
//! |--------|-----------------------------------|--------------------------------------|
//! | GET    | `/api/tables`                     | known keys                           |
//! | GET    | `/api/tables/{table}/{index}`     | history, newest first (`?limit=N`)   |
//! | POST   | `/api/setpoint`                   | `{"index":1,"value":4.0}`            |
//! | POST   | `/api/opmode`                     | `{"value":0}` or `{"value":1}`       |
//! | POST   | `/api/tuning`                     | `{"index":1,"kp":..,"tau_i":..,"u_bar":..}` |
//! | GET    | `/api/stream`                     | WebSocket push (`?keys=sensor:1,..`) |
//! | GET    | `/api/jitter/{timer}`             | timer jitter summary                 |
//!
//! Records are JSON objects `{"ts":"2024-01-01 00:00:00.000000","status":"ok","value":1.5}`.
//! The gateway holds no process data of its own; everything lives in the
//! store.

pub mod command;
pub mod stream;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use rtapc::experiment::TimerRegistry;
use rtapc::store::{StoreError, ValueKind};
use rtapc::{Clock, Record, SharedData, TableKey, Timestamp};

pub use command::{apply_command, Command, CommandError};
pub use stream::{StreamMessage, Subscription};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 100_000;
pub const HEARTBEAT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for GatewayError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) | StoreError::NoData(_) => GatewayError::NotFound(e.to_string()),
            StoreError::InvalidTable(_) | StoreError::InvalidIndex(_) | StoreError::NonFinite { .. } => {
                GatewayError::BadRequest(e.to_string())
            }
            other => GatewayError::Internal(other.to_string()),
        }
    }
}

impl From<CommandError> for GatewayError {
    fn from(e: CommandError) -> Self {
        match e {
            CommandError::Invalid(m) => GatewayError::BadRequest(m),
            CommandError::Store(s) => s.into(),
        }
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let code = match self {
            GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
            GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
            GatewayError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// At most `limit` records of `(table, index)`, newest first.
pub fn query_history(store: &dyn SharedData, table: &str, index: usize, limit: usize) -> Result<Vec<Record<f64>>, GatewayError> {
    let key = TableKey::new(table, index)?;
    Ok(store.history_newest(&key, limit.min(MAX_LIMIT))?)
}

#[derive(Clone)]
pub struct Gateway {
    store: Arc<dyn SharedData>,
    clock: Clock,
    timers: Option<TimerRegistry>,
    heartbeat: Duration,
    capacity: usize,
}

impl Gateway {
    pub fn new(store: Arc<dyn SharedData>, clock: Clock) -> Self {
        Gateway { store, clock, timers: None, heartbeat: HEARTBEAT, capacity: stream::DEFAULT_CAPACITY }
    }

    pub fn with_timers(mut self, timers: TimerRegistry) -> Self {
        self.timers = Some(timers);
        self
    }

    pub fn with_heartbeat(mut self, every: Duration) -> Self {
        self.heartbeat = every;
        self
    }

    /// Per-subscriber buffer size before the oldest records are dropped.
    pub fn with_stream_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/tables", get(list_tables))
            .route("/api/tables/:table/:index", get(get_history))
            .route("/api/setpoint", post(post_setpoint))
            .route("/api/opmode", post(post_opmode))
            .route("/api/tuning", post(post_tuning))
            .route("/api/stream", get(get_stream))
            .route("/api/jitter/:timer", get(get_jitter))
            .with_state(self)
    }

    /// Serves until the listener fails.
    pub async fn serve(self, listener: tokio::net::TcpListener) -> std::io::Result<()> {
        log::info!("gateway listening on {}", listener.local_addr()?);
        axum::serve(listener, self.router()).await
    }

    pub async fn bind(self, addr: SocketAddr) -> std::io::Result<()> {
        self.serve(tokio::net::TcpListener::bind(addr).await?).await
    }
}

#[derive(Serialize)]
struct KeyInfo {
    table: String,
    index: usize,
    kind: &'static str,
}

async fn list_tables(State(gw): State<Gateway>) -> Json<Vec<KeyInfo>> {
    Json(
        gw.store
            .keys()
            .into_iter()
            .map(|(k, kind)| KeyInfo {
                table: k.table().to_owned(),
                index: k.index(),
                kind: match kind {
                    ValueKind::Float => "float",
                    ValueKind::Int => "int",
                },
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct Limit {
    limit: Option<usize>,
}

async fn get_history(
    State(gw): State<Gateway>,
    Path((table, index)): Path<(String, usize)>,
    Query(q): Query<Limit>,
) -> Result<Json<Vec<Record<f64>>>, GatewayError> {
    query_history(&*gw.store, &table, index, q.limit.unwrap_or(DEFAULT_LIMIT)).map(Json)
}

#[derive(Serialize)]
struct Ack {
    status: &'static str,
    ts: Timestamp,
}

fn run_command(gw: &Gateway, cmd: Command) -> Result<Json<Ack>, GatewayError> {
    let ts = apply_command(&*gw.store, &gw.clock, &cmd)?;
    log::info!("gateway: applied {cmd:?}");
    Ok(Json(Ack { status: "ok", ts }))
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
struct SetpointBody {
    #[serde(default = "one")]
    index: usize,
    value: f64,
}

#[derive(Deserialize)]
struct OpmodeBody {
    value: i64,
}

#[derive(Deserialize)]
struct TuningBody {
    #[serde(default = "one")]
    index: usize,
    kp: f64,
    tau_i: f64,
    u_bar: f64,
}

async fn post_setpoint(State(gw): State<Gateway>, Json(b): Json<SetpointBody>) -> Result<Json<Ack>, GatewayError> {
    run_command(&gw, Command::SetSetpoint { index: b.index, value: b.value })
}

async fn post_opmode(State(gw): State<Gateway>, Json(b): Json<OpmodeBody>) -> Result<Json<Ack>, GatewayError> {
    run_command(&gw, Command::SetOpmode { value: b.value })
}

async fn post_tuning(State(gw): State<Gateway>, Json(b): Json<TuningBody>) -> Result<Json<Ack>, GatewayError> {
    run_command(&gw, Command::SetTuning { index: b.index, kp: b.kp, tau_i: b.tau_i, u_bar: b.u_bar })
}

async fn get_jitter(State(gw): State<Gateway>, Path(timer): Path<String>) -> Result<Response, GatewayError> {
    let report = gw.timers.as_ref().and_then(|t| t.report(&timer));
    match report {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(GatewayError::NotFound(format!("unknown timer {timer:?}"))),
    }
}

#[derive(Deserialize)]
struct StreamQuery {
    keys: Option<String>,
}

/// Parses `sensor:1,actuator:1`.
pub fn parse_keys(text: &str) -> Result<Vec<TableKey>, GatewayError> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (table, index) = item
                .rsplit_once(':')
                .ok_or_else(|| GatewayError::BadRequest(format!("expected table:index, got {item:?}")))?;
            let index: usize = index.parse().map_err(|_| GatewayError::BadRequest(format!("bad index in {item:?}")))?;
            Ok(TableKey::new(table, index)?)
        })
        .collect()
}

async fn get_stream(
    State(gw): State<Gateway>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, GatewayError> {
    let keys = parse_keys(q.keys.as_deref().unwrap_or(""))?;
    let sub = Subscription::new(gw.store.clone(), keys, gw.capacity);
    Ok(ws.on_upgrade(move |socket| push(socket, sub, gw)))
}

async fn push(mut socket: WebSocket, sub: Subscription, gw: Gateway) {
    let mut heartbeat = tokio::time::interval_at(tokio::time::Instant::now() + gw.heartbeat, gw.heartbeat);
    loop {
        let outgoing = tokio::select! {
            batch = sub.next_batch() => batch,
            _ = heartbeat.tick() => vec![StreamMessage::Heartbeat { ts: gw.clock.now_utc() }],
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
        };
        for msg in outgoing {
            if socket.send(Message::Text(msg.to_json())).await.is_err() {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rtapc::DataStore;

    #[test]
    fn history_newest_first_and_limited() {
        let store = DataStore::new();
        let key = TableKey::new("sensor", 1).unwrap();
        for v in 1..=5 {
            store.insert_float(&key, Record::ok(Timestamp::from_unix_micros(v).unwrap(), v as f64)).unwrap();
        }
        let got: Vec<f64> = query_history(&store, "sensor", 1, 3).unwrap().iter().map(|r| r.value).collect();
        assert_eq!(got, vec![5.0, 4.0, 3.0]);
        assert!(query_history(&store, "sensor", 1, 0).unwrap().is_empty());
        assert!(matches!(query_history(&store, "nope", 1, 3), Err(GatewayError::NotFound(_))));
        assert!(matches!(query_history(&store, "bad name", 1, 3), Err(GatewayError::BadRequest(_))));
    }

    #[test]
    fn key_lists() {
        let keys = parse_keys("sensor:1,actuator:2").unwrap();
        assert_eq!(keys, vec![TableKey::new("sensor", 1).unwrap(), TableKey::new("actuator", 2).unwrap()]);
        assert!(parse_keys("").unwrap().is_empty());
        assert!(parse_keys("sensor").is_err());
        assert!(parse_keys("sensor:0").is_err());
    }
}
