//! Average model of the series string: inverter-1 as a lagged current source,
//! the remaining modules as ideal voltage sources, and a series R-L line into
//! a stiff grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Electrical parameters of the cascaded string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Number of cascaded modules.
    pub n: usize,
    /// Series line inductance, H.
    #[serde(rename = "L_line")]
    pub l_line: f64,
    /// Series line resistance, ohm.
    #[serde(rename = "R_line")]
    pub r_line: f64,
    /// Time constant of inverter-1's current tracking, s.
    pub tau_i: f64,
    /// Grid current limit, A peak.
    #[serde(rename = "I_max")]
    pub i_max: f64,
    /// Per-module voltage limit, V peak.
    #[serde(rename = "V_max")]
    pub v_max: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams { n: 3, l_line: 0.3e-3, r_line: 0.01, tau_i: 0.5e-3, i_max: 60.0, v_max: 200.0 }
    }
}

impl PlantParams {
    /// Checks the parameters for a simulation stepped at `dt`.
    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(
                "plant.n",
                "need one current-controlled and at least one voltage-controlled inverter",
            ));
        }
        if !(self.l_line > 0.0) || !self.l_line.is_finite() {
            return Err(Error::invalid("plant.L_line", "line inductance must be positive"));
        }
        if !(self.r_line >= 0.0) || !self.r_line.is_finite() {
            return Err(Error::invalid("plant.R_line", "line resistance must be non-negative"));
        }
        if !(self.tau_i > 0.0) || !self.tau_i.is_finite() {
            return Err(Error::invalid("plant.tau_i", "tracking time constant must be positive"));
        }
        if self.tau_i < 2.0 * dt {
            return Err(Error::invalid("plant.tau_i", format!("must be at least 2*dt = {:.3e} s", 2.0 * dt)));
        }
        if !(self.i_max > 0.0) {
            return Err(Error::invalid("plant.I_max", "current limit must be positive"));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::invalid("plant.V_max", "voltage limit must be positive"));
        }
        Ok(())
    }
}

/// Grid (PCC) voltage `amplitude * sin(omega * t + phase0)`.
pub fn grid_voltage(t: f64, amplitude: f64, omega: f64, phase0: f64) -> f64 {
    amplitude * (omega * t + phase0).sin()
}

/// Instantaneous electrical state of the string.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub i_g: f64,
    /// Grid phase `omega * t + phase0`, unwrapped.
    pub theta_g: f64,
    pub u_terms: Vec<f64>,
    pub u_pcc: f64,
}

impl PlantState {
    pub fn new(n: usize) -> Self {
        PlantState { i_g: 0.0, theta_g: 0.0, u_terms: vec![0.0; n], u_pcc: 0.0 }
    }
}

/// Rate of change of the grid current implied by the first-order tracking law.
pub fn tracking_slope(i_g: f64, i_ref: f64, tau_i: f64) -> f64 {
    (i_ref - i_g) / tau_i
}

/// Advances the grid current one step towards `i_ref` with a first-order lag.
pub fn track_current(state: &mut PlantState, params: &PlantParams, i_ref: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveStep(dt));
    }
    if !i_ref.is_finite() {
        return Err(Error::NonFinite("current reference"));
    }
    state.i_g += tracking_slope(state.i_g, i_ref, params.tau_i) * dt;
    Ok(state.i_g)
}

/// Terminal voltage the current source must produce to close the loop
/// `sum(u) = u_pcc + L di/dt + R i`.
pub fn inverter1_terminal_voltage(params: &PlantParams, i_g: f64, u_pcc: f64, sum_u_others: f64, di_dt: f64) -> f64 {
    u_pcc + params.l_line * di_dt + params.r_line * i_g - sum_u_others
}

/// Residual of the loop equation; zero to rounding by construction.
pub fn kvl_residual(params: &PlantParams, state: &PlantState, di_dt: f64) -> f64 {
    let sum: f64 = state.u_terms.iter().sum();
    sum - state.u_pcc - params.l_line * di_dt - params.r_line * state.i_g
}
