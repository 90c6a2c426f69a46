//! Real-time plant proxy.
//!
//! Each simulator tick reads the held input, integrates the model over one
//! interval and publishes the new state and measurements. All access to the
//! [`PlantState`] goes through one mutex that the plant server shares.

use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::ode::{integrate, OdeError, OdeModel, PlantDims};
use crate::record::StatusCode;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("plant state dims {state:?} do not match model dims {model:?}")]
    DimsMismatch { state: PlantDims, model: PlantDims },
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// State, held input and latest measurements of the simulated plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    dims: PlantDims,
    x: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
    status: StatusCode,
}

pub type SharedPlant = Arc<Mutex<PlantState>>;

impl PlantState {
    /// Initial state `x0` with held input `u0`; `y` is computed from the model.
    pub fn new(model: &dyn OdeModel, x0: Vec<f64>, u0: Vec<f64>) -> Result<Self, SimError> {
        let dims = model.dims();
        if x0.len() != dims.n_states || u0.len() != dims.n_inputs {
            return Err(SimError::Config(format!(
                "initial vectors ({} states, {} inputs) do not match {dims:?}",
                x0.len(),
                u0.len()
            )));
        }
        if x0.iter().chain(&u0).any(|v| !v.is_finite()) {
            return Err(SimError::Config("initial values must be finite".into()));
        }
        let y = model.output_vec(&x0, &u0);
        Ok(PlantState { dims, x: x0, u: u0, y, status: StatusCode::ok() })
    }

    pub fn shared(self) -> SharedPlant {
        Arc::new(Mutex::new(self))
    }

    pub fn dims(&self) -> PlantDims {
        self.dims
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Status attached to outgoing measurements: "ok", or "error" after a
    /// failed integration until the next successful tick.
    pub fn status(&self) -> &StatusCode {
        &self.status
    }

    /// Replaces the held input. Length must match and values be finite.
    pub fn set_input(&mut self, u: &[f64]) -> Result<(), SimError> {
        if u.len() != self.dims.n_inputs {
            return Err(SimError::Config(format!("expected {} inputs, got {}", self.dims.n_inputs, u.len())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Config("inputs must be finite".into()));
        }
        self.u.copy_from_slice(u);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    /// Simulator interval in seconds.
    pub interval: f64,
    /// RK4 sub-steps per interval.
    pub steps: usize,
}

impl SimConfig {
    pub fn new(interval: f64, steps: usize) -> Result<Self, SimError> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(SimError::Config(format!("interval {interval} must be > 0")));
        }
        if steps == 0 {
            return Err(SimError::Config("steps must be >= 1".into()));
        }
        Ok(SimConfig { interval, steps })
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { interval: 0.2, steps: 10 }
    }
}

/// What one tick did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimStep {
    pub x_before: Vec<f64>,
    pub u: Vec<f64>,
    pub x_after: Vec<f64>,
    pub y: Vec<f64>,
}

/// Advances the plant by one interval.
///
/// The input is sampled once at the start, so a server write during
/// integration takes effect on the next tick. On failure the state is left
/// unchanged and the measurement status becomes "error".
pub fn simulator_tick(plant: &Mutex<PlantState>, model: &dyn OdeModel, cfg: &SimConfig) -> Result<SimStep, SimError> {
    let (x0, u) = {
        let state = plant.lock().unwrap();
        if state.dims != model.dims() {
            return Err(SimError::DimsMismatch { state: state.dims, model: model.dims() });
        }
        (state.x.clone(), state.u.clone())
    };
    let traj = match integrate(model, 0.0, cfg.interval, cfg.steps, &x0, &u) {
        Ok(t) => t,
        Err(e) => {
            plant.lock().unwrap().status = StatusCode::error();
            log::error!("simulator: integration failed, state frozen: {e}");
            return Err(e.into());
        }
    };
    let x = traj.final_state().to_vec();
    let y = model.output_vec(&x, &u);
    {
        let mut state = plant.lock().unwrap();
        state.x.clone_from(&x);
        state.y.clone_from(&y);
        state.status = StatusCode::ok();
    }
    Ok(SimStep { x_before: x0, u, x_after: x, y })
}

/// Per-tick record of the plant, for the `t,x...,u...,y...` dump.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimTrace {
    pub rows: Vec<(f64, SimStep)>,
}

impl SimTrace {
    pub fn push(&mut self, t: f64, step: SimStep) {
        self.rows.push((t, step));
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(writer);
        if let Some((_, first)) = self.rows.first() {
            let mut header = vec!["t".to_owned()];
            header.extend((1..=first.x_after.len()).map(|i| format!("x{i}")));
            header.extend((1..=first.u.len()).map(|i| format!("u{i}")));
            header.extend((1..=first.y.len()).map(|i| format!("y{i}")));
            out.write_record(&header)?;
        } else {
            out.write_record(["t"])?;
        }
        for (t, step) in &self.rows {
            let mut row = vec![t.to_string()];
            row.extend(step.x_after.iter().chain(&step.u).chain(&step.y).map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
