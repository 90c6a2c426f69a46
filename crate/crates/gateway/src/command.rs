//! Operator commands, validated and translated into store inserts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rtapc::store::{StoreError, OPMODE, SETPOINT, TUNING_KP, TUNING_TAUI, TUNING_UBAR};
use rtapc::{Clock, Record, SharedData, TableKey, Timestamp};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    SetSetpoint {
        #[serde(default = "one")]
        index: usize,
        value: f64,
    },
    SetOpmode {
        value: i64,
    },
    SetTuning {
        #[serde(default = "one")]
        index: usize,
        kp: f64,
        tau_i: f64,
        u_bar: f64,
    },
}

impl Command {
    pub fn validate(&self) -> Result<(), CommandError> {
        let invalid = |m: String| Err(CommandError::Invalid(m));
        match *self {
            Command::SetSetpoint { index, value } => {
                if index < 1 {
                    return invalid("index must be >= 1".into());
                }
                if !value.is_finite() {
                    return invalid(format!("setpoint {value} is not finite"));
                }
            }
            Command::SetOpmode { value } => {
                if !matches!(value, 0 | 1) {
                    return invalid(format!("operation mode must be 0 (manual) or 1 (automatic), got {value}"));
                }
            }
            Command::SetTuning { index, kp, tau_i, u_bar } => {
                if index < 1 {
                    return invalid("index must be >= 1".into());
                }
                if !(kp.is_finite() && tau_i.is_finite() && u_bar.is_finite()) {
                    return invalid("tuning values must be finite".into());
                }
                if tau_i <= 0.0 {
                    return invalid(format!("tau_i must be > 0, got {tau_i}"));
                }
            }
        }
        Ok(())
    }
}

/// Validates `cmd` and writes it to shared data stamped with the clock.
/// Returns the stamp. On a validation error nothing is written.
pub fn apply_command(store: &dyn SharedData, clock: &Clock, cmd: &Command) -> Result<Timestamp, CommandError> {
    cmd.validate()?;
    if let Command::SetSetpoint { index, .. } = *cmd {
        if let Ok(dims) = store.read_dims() {
            if index > dims.n_setp {
                return Err(CommandError::Invalid(format!("setpoint index {index} exceeds {}", dims.n_setp)));
            }
        }
    }
    let ts = clock.now_utc();
    match *cmd {
        Command::SetSetpoint { index, value } => {
            store.insert_float(&TableKey::new(SETPOINT, index)?, Record::ok(ts, value))?;
        }
        Command::SetOpmode { value } => {
            store.insert_int(&TableKey::new(OPMODE, 1)?, Record::ok(ts, value))?;
        }
        Command::SetTuning { index, kp, tau_i, u_bar } => {
            for (table, v) in [(TUNING_KP, kp), (TUNING_TAUI, tau_i), (TUNING_UBAR, u_bar)] {
                store.insert_float(&TableKey::new(table, index)?, Record::ok(ts, v))?;
            }
        }
    }
    Ok(ts)
}
