//! Building blocks for soft real-time networked process control.
//!
//! A control system and a plant exchange time-stamped records over TCP,
//! each side driven by periodic timers and coordinating through a shared
//! store of per-variable histories. See the guide in `book/` for a tour.

pub mod bridge;
pub mod clock;
pub mod control;
pub mod experiment;
pub mod jitter;
pub mod ode;
pub mod protocol;
pub mod record;
pub mod scheduler;
pub mod server;
pub mod simulator;
pub mod store;
pub mod time;

pub use clock::{Clock, ClockMode};
pub use record::{Record, StatusCode};
pub use store::{DataStore, DimensionSpec, SharedData, TableKey};
pub use time::{now_utc, Timestamp};
