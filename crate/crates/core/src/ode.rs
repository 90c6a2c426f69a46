//! Plant models and the fixed-step integrator.
//!
//! A model is `dx/dt = f(t, x, u)` with outputs `y = g(x, u)`. The input `u`
//! is held constant over an integration span (zero-order hold), and the
//! span is covered by `N` classical fourth-order Runge-Kutta steps.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("integration span [{t0}, {tn}] is empty or not finite")]
    Span { t0: f64, tn: f64 },
    #[error("step count must be >= 1")]
    Steps,
    #[error("expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("state became non-finite in sub-step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("invalid model parameter: {0}")]
    Parameter(String),
}

/// Sizes of state, output and input vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlantDims {
    pub n_states: usize,
    pub n_outputs: usize,
    pub n_inputs: usize,
}

/// `f` and `g` must be pure functions of their arguments.
pub trait OdeModel: Send + Sync {
    fn dims(&self) -> PlantDims;
    fn derivative(&self, t: f64, x: &[f64], u: &[f64], dx: &mut [f64]);
    fn output(&self, x: &[f64], u: &[f64], y: &mut [f64]);

    fn output_vec(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dims().n_outputs];
        self.output(x, u, &mut y);
        y
    }
}

/// `dx/dt = (K u - x) / tau`, `y = x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstOrderModel {
    gain: f64,
    time_constant: f64,
}

impl FirstOrderModel {
    pub fn new(gain: f64, time_constant: f64) -> Result<Self, OdeError> {
        if !gain.is_finite() {
            return Err(OdeError::Parameter(format!("gain {gain} is not finite")));
        }
        if !(time_constant.is_finite() && time_constant > 0.0) {
            return Err(OdeError::Parameter(format!("time constant {time_constant} must be > 0")));
        }
        Ok(FirstOrderModel { gain, time_constant })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn time_constant(&self) -> f64 {
        self.time_constant
    }

    /// Closed-form response to a constant input.
    pub fn analytic(&self, x0: f64, u: f64, t: f64) -> f64 {
        let ss = self.gain * u;
        ss + (x0 - ss) * (-t / self.time_constant).exp()
    }
}

impl OdeModel for FirstOrderModel {
    fn dims(&self) -> PlantDims {
        PlantDims { n_states: 1, n_outputs: 1, n_inputs: 1 }
    }

    fn derivative(&self, _t: f64, x: &[f64], u: &[f64], dx: &mut [f64]) {
        dx[0] = (-x[0] + self.gain * u[0]) / self.time_constant;
    }

    fn output(&self, x: &[f64], _u: &[f64], y: &mut [f64]) {
        y[0] = x[0];
    }
}

/// Solution samples: `times[i]` and `states[i]` for `i = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds N + 1 >= 2 samples")
    }
}

/// Integrates over `[t0, tn]` in `steps` equal RK4 steps with `u` held.
pub fn integrate(
    model: &dyn OdeModel,
    t0: f64,
    tn: f64,
    steps: usize,
    x0: &[f64],
    u: &[f64],
) -> Result<Trajectory, OdeError> {
    if !(t0.is_finite() && tn.is_finite() && tn > t0) {
        return Err(OdeError::Span { t0, tn });
    }
    if steps == 0 {
        return Err(OdeError::Steps);
    }
    let dims = model.dims();
    if x0.len() != dims.n_states {
        return Err(OdeError::Dimension { what: "states", expected: dims.n_states, got: x0.len() });
    }
    if u.len() != dims.n_inputs {
        return Err(OdeError::Dimension { what: "inputs", expected: dims.n_inputs, got: u.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::NonFinite { step: 0, t: t0 });
    }

    let n = dims.n_states;
    let h = (tn - t0) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(x0.to_vec());

    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 1..=steps {
        let t = t0 + (step - 1) as f64 * h;
        model.derivative(t, &x, u, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        model.derivative(t + 0.5 * h, &tmp, u, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        model.derivative(t + 0.5 * h, &tmp, u, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        model.derivative(t + h, &tmp, u, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = if step == steps { tn } else { t0 + step as f64 * h };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite { step, t: t_next });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}
