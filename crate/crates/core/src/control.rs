//! Periodic control task and the PI law.
//!
//! The PI recursion, with `Ts` the controller interval:
//!
//! ```text
//! e_k     = z̄_k - y_k
//! P_k     = Kp * e_k
//! u_k     = ū + P_k + I_k
//! I_{k+1} = I_k + (Kp * Ts / τi) * e_k,    I_0 = Ī
//! ```
//!
//! A [`ControlLaw`] computes outputs from its current state first and only
//! then updates that state, so the value written at tick `k` always uses
//! `I_k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::record::Record;
use crate::store::{
    SharedData, StoreError, TableKey, ACTUATOR, OPMODE, SENSOR, SETPOINT, TUNING_KP, TUNING_TAUI, TUNING_UBAR,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("{what} is not finite")]
    NonFinite { what: &'static str },
    #[error("invalid PI parameters: {0}")]
    Params(String),
    #[error("law handles {loops} loops but dims are ({n_meas}, {n_setp}, {n_manip})")]
    Dims { loops: usize, n_meas: usize, n_setp: usize, n_manip: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Gains, operating point and integrator of one PI loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiState {
    pub kp: f64,
    /// Integral time constant, seconds.
    pub tau_i: f64,
    pub u_bar: f64,
    /// Controller interval, seconds.
    pub ts: f64,
    pub i_bar: f64,
    pub integral: f64,
    /// Output clamp. Off by default.
    #[serde(default)]
    pub output_limits: Option<(f64, f64)>,
    /// Integrator clamp (anti-windup). Off by default.
    #[serde(default)]
    pub integral_limits: Option<(f64, f64)>,
}

impl PiState {
    /// A fresh controller with `I = i_bar`.
    pub fn new(kp: f64, tau_i: f64, u_bar: f64, ts: f64, i_bar: f64) -> Result<Self, ControlError> {
        let s = PiState {
            kp,
            tau_i,
            u_bar,
            ts,
            i_bar,
            integral: i_bar,
            output_limits: None,
            integral_limits: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let finite = [self.kp, self.tau_i, self.u_bar, self.ts, self.i_bar, self.integral];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(ControlError::Params("all parameters must be finite".into()));
        }
        if self.tau_i <= 0.0 {
            return Err(ControlError::Params(format!("tau_i = {} must be > 0", self.tau_i)));
        }
        if self.ts <= 0.0 {
            return Err(ControlError::Params(format!("Ts = {} must be > 0", self.ts)));
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.integral = self.i_bar;
    }
}

fn check_inputs(y: f64, z_bar: f64) -> Result<(), ControlError> {
    if !y.is_finite() {
        return Err(ControlError::NonFinite { what: "measurement" });
    }
    if !z_bar.is_finite() {
        return Err(ControlError::NonFinite { what: "setpoint" });
    }
    Ok(())
}

/// `u = ū + Kp (z̄ - y) + I`. Does not touch the state.
pub fn pi_output(y: f64, z_bar: f64, s: &PiState) -> Result<f64, ControlError> {
    check_inputs(y, z_bar)?;
    let e = z_bar - y;
    let p = s.kp * e;
    let u = s.u_bar + p + s.integral;
    Ok(match s.output_limits {
        Some((lo, hi)) => u.clamp(lo, hi),
        None => u,
    })
}

/// `I' = I + (Kp Ts / τi)(z̄ - y)`; every other field is copied.
pub fn pi_update(y: f64, z_bar: f64, s: &PiState) -> Result<PiState, ControlError> {
    check_inputs(y, z_bar)?;
    let e = z_bar - y;
    let mut integral = s.integral + (s.kp * s.ts / s.tau_i) * e;
    if let Some((lo, hi)) = s.integral_limits {
        integral = integral.clamp(lo, hi);
    }
    Ok(PiState { integral, ..*s })
}

/// Two-phase control law: compute, then (after the outputs are written)
/// update.
pub trait ControlLaw: Send {
    /// Pulls live configuration from shared data before each automatic tick.
    fn configure(&mut self, _store: &dyn SharedData) {}

    fn output(&self, y: &[f64], z_bar: &[f64], n_manip: usize) -> Result<Vec<f64>, ControlError>;

    fn update(&mut self, u: &[f64], y: &[f64], z_bar: &[f64]) -> Result<(), ControlError>;
}

/// Independent PI loops pairing measurement `i` with setpoint `i` and
/// manipulated variable `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiLaw {
    loops: Vec<PiState>,
}

impl PiLaw {
    pub fn new(loops: Vec<PiState>) -> Result<Self, ControlError> {
        if loops.is_empty() {
            return Err(ControlError::Params("at least one loop is required".into()));
        }
        for l in &loops {
            l.validate()?;
        }
        Ok(PiLaw { loops })
    }

    pub fn scalar(state: PiState) -> Result<Self, ControlError> {
        Self::new(vec![state])
    }

    pub fn loops(&self) -> &[PiState] {
        &self.loops
    }

    fn check_dims(&self, n_meas: usize, n_setp: usize, n_manip: usize) -> Result<(), ControlError> {
        let n = self.loops.len();
        if n_meas != n || n_setp != n || n_manip != n {
            return Err(ControlError::Dims { loops: n, n_meas, n_setp, n_manip });
        }
        Ok(())
    }
}

fn recent_value(store: &dyn SharedData, table: &str, index: usize) -> Option<f64> {
    let key = TableKey::new(table, index).ok()?;
    store.recent_float(&key).ok().map(|r| r.value).filter(|v| v.is_finite())
}

impl ControlLaw for PiLaw {
    /// Reads `tuning_kp`, `tuning_taui` and `tuning_ubar` at the loop's index
    /// when present. Invalid tunings are ignored.
    fn configure(&mut self, store: &dyn SharedData) {
        for (i, l) in self.loops.iter_mut().enumerate() {
            let mut next = *l;
            if let Some(kp) = recent_value(store, TUNING_KP, i + 1) {
                next.kp = kp;
            }
            if let Some(tau_i) = recent_value(store, TUNING_TAUI, i + 1) {
                next.tau_i = tau_i;
            }
            if let Some(u_bar) = recent_value(store, TUNING_UBAR, i + 1) {
                next.u_bar = u_bar;
            }
            match next.validate() {
                Ok(()) => *l = next,
                Err(e) => log::warn!("control: ignoring tuning for loop {}: {e}", i + 1),
            }
        }
    }

    fn output(&self, y: &[f64], z_bar: &[f64], n_manip: usize) -> Result<Vec<f64>, ControlError> {
        self.check_dims(y.len(), z_bar.len(), n_manip)?;
        self.loops.iter().zip(y.iter().zip(z_bar)).map(|(s, (y, z))| pi_output(*y, *z, s)).collect()
    }

    fn update(&mut self, _u: &[f64], y: &[f64], z_bar: &[f64]) -> Result<(), ControlError> {
        self.check_dims(y.len(), z_bar.len(), self.loops.len())?;
        let next: Vec<PiState> = self
            .loops
            .iter()
            .zip(y.iter().zip(z_bar))
            .map(|(s, (y, z))| pi_update(*y, *z, s))
            .collect::<Result<_, _>>()?;
        self.loops = next;
        Ok(())
    }
}

/// What a control tick did.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlOutcome {
    /// Operation mode 0: nothing read, written or updated.
    Manual,
    /// Automatic mode but inputs were missing; state untouched.
    Skipped(String),
    Applied { y: Vec<f64>, z_bar: Vec<f64>, u: Vec<f64> },
}

/// One control-task period.
///
/// In automatic mode (opmode != 0) reads dims, measurements and setpoints,
/// writes `u` to `("actuator", 1..)` stamped with the clock, then updates the
/// law. Missing data skips the tick; law errors are returned.
pub fn control_tick(store: &dyn SharedData, law: &mut dyn ControlLaw, clock: &Clock) -> Result<ControlOutcome, ControlError> {
    let opmode = match store.read_recent_int(OPMODE, 1) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("control: no operation mode, tick skipped: {e}");
            return Ok(ControlOutcome::Skipped(e.to_string()));
        }
    };
    if opmode == 0 {
        return Ok(ControlOutcome::Manual);
    }
    let inputs = store.read_dims().and_then(|dims| {
        let y = store.read_recent_multi_float(SENSOR, dims.n_meas)?;
        let z = store.read_recent_multi_float(SETPOINT, dims.n_setp)?;
        Ok((dims, y, z))
    });
    let (dims, y, z_bar) = match inputs {
        Ok((dims, y, z)) => (dims, values(&y), values(&z)),
        Err(e) => {
            log::warn!("control: tick skipped: {e}");
            return Ok(ControlOutcome::Skipped(e.to_string()));
        }
    };
    law.configure(store);
    let u = law.output(&y, &z_bar, dims.n_manip)?;
    if u.len() != dims.n_manip {
        return Err(ControlError::Dims { loops: u.len(), n_meas: dims.n_meas, n_setp: dims.n_setp, n_manip: dims.n_manip });
    }
    let ts = clock.now_utc();
    for (i, v) in u.iter().enumerate() {
        store.insert_float(&TableKey::new(ACTUATOR, i + 1)?, Record::ok(ts, *v))?;
    }
    law.update(&u, &y, &z_bar)?;
    Ok(ControlOutcome::Applied { y, z_bar, u })
}

fn values(records: &[Record<f64>]) -> Vec<f64> {
    records.iter().map(|r| r.value).collect()
}
