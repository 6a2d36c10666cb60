//! Phasor-domain steady state of the string under the local control laws.
//!
//! At equilibrium every voltage-controlled inverter sits exactly at the
//! reference PF angle from the common current, so all of them share the PCC
//! phase and their amplitudes split the string voltage in proportion to their
//! powers. Inverter-1 takes up whatever the line impedance leaves over, so its
//! phase is solved rather than assumed.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{wrap_angle, Phasor};

pub const TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100;

/// Inputs of the steady-state problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyInputs {
    /// Power reference per inverter, W (inverter-1 first).
    pub p_ref: Vec<f64>,
    pub phi_ref: f64,
    /// Grid voltage amplitude, V peak.
    pub v_grid: f64,
    pub omega: f64,
    pub l_line: f64,
    pub r_line: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadySolution {
    /// Grid-current amplitude, A peak.
    pub i_g: f64,
    /// Grid-current phase relative to the PCC voltage.
    pub theta_ig: f64,
    pub v: Vec<f64>,
    /// Inverter voltage phases relative to the PCC voltage.
    pub theta: Vec<f64>,
    /// PF angles `theta_i - theta_ig`.
    pub phi: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub p_pcc: f64,
    pub q_pcc: f64,
    pub pf_pcc: f64,
    pub iterations: usize,
}

impl SteadySolution {
    pub fn current(&self) -> Phasor {
        Phasor::new(self.i_g, self.theta_ig)
    }

    pub fn voltage(&self, i: usize) -> Phasor {
        Phasor::new(self.v[i], self.theta[i])
    }
}

pub fn solve_steady(inp: &SteadyInputs) -> Result<SteadySolution> {
    if inp.p_ref.len() < 2 {
        return Err(Error::invalid("p_ref", "need at least two inverters"));
    }
    if let Some(i) = inp.p_ref.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid(format!("p_ref[{}]", i + 1), "power references must be finite and non-negative"));
    }
    let total: f64 = inp.p_ref.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoPowerCommanded);
    }
    let cos_phi = inp.phi_ref.cos();
    if !(cos_phi > 0.0) {
        return Err(Error::invalid("phi_ref", "cos(phi_ref) must be positive"));
    }
    if !(inp.v_grid > 0.0) {
        return Err(Error::invalid("v_grid", "grid voltage must be positive"));
    }
    if !(inp.l_line >= 0.0 && inp.r_line >= 0.0) {
        return Err(Error::invalid("line", "line impedance must be non-negative"));
    }

    // String power 0.5 I (V_g cos(phi) + R I) equals the commanded total.
    let mut i_g = 2.0 * total / (inp.v_grid * cos_phi);
    let mut iterations = 0;
    loop {
        let next = 2.0 * total / (inp.v_grid * cos_phi + inp.r_line * i_g);
        iterations += 1;
        let residual = (next - i_g).abs() / next;
        i_g = next;
        if residual < TOLERANCE {
            break;
        }
        if iterations >= MAX_ITERATIONS {
            return Err(Error::NoConvergence { residual, iterations });
        }
    }

    let theta_ig = -inp.phi_ref;
    let current = Complex64::from_polar(i_g, theta_ig);
    let z = Complex64::new(inp.r_line, inp.omega * inp.l_line);
    let n = inp.p_ref.len();

    let mut v = vec![0.0; n];
    let mut theta = vec![0.0; n];
    for k in 1..n {
        v[k] = 2.0 * inp.p_ref[k] / (i_g * cos_phi);
    }
    let others: f64 = v[1..].iter().sum();
    let v1 = Complex64::new(inp.v_grid, 0.0) + z * current - others;
    v[0] = v1.norm();
    theta[0] = v1.arg();
    if (theta[0] - theta_ig).cos() < 0.0 {
        return Err(Error::StringVoltageInsufficient(-v[0]));
    }

    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut phi = vec![0.0; n];
    for k in 0..n {
        phi[k] = wrap_angle(theta[k] - theta_ig);
        p[k] = 0.5 * v[k] * i_g * phi[k].cos();
        q[k] = 0.5 * v[k] * i_g * phi[k].sin();
    }

    Ok(SteadySolution {
        i_g,
        theta_ig,
        v,
        theta,
        phi,
        p,
        q,
        p_pcc: 0.5 * inp.v_grid * i_g * cos_phi,
        q_pcc: 0.5 * inp.v_grid * i_g * inp.phi_ref.sin(),
        pf_pcc: cos_phi,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_max: f64,
    pub i_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    OverVoltage { inverter: usize, amplitude: f64, limit: f64, margin: f64 },
    OverCurrent { amplitude: f64, limit: f64, margin: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::OverVoltage { inverter, amplitude, limit, .. } => {
                write!(f, "inverter-{inverter} voltage {amplitude:.2} V exceeds {limit:.2} V")
            }
            Violation::OverCurrent { amplitude, limit, .. } => {
                write!(f, "grid current {amplitude:.2} A exceeds {limit:.2} A")
            }
        }
    }
}

/// Limit breaches of a solution; `margin` is how far past the limit it lies.
pub fn check_feasibility(sol: &SteadySolution, limits: Limits) -> Vec<Violation> {
    let mut out = Vec::new();
    for (k, &v) in sol.v.iter().enumerate() {
        if v > limits.v_max {
            out.push(Violation::OverVoltage {
                inverter: k + 1,
                amplitude: v,
                limit: limits.v_max,
                margin: v - limits.v_max,
            });
        }
    }
    if sol.i_g > limits.i_max {
        out.push(Violation::OverCurrent { amplitude: sol.i_g, limit: limits.i_max, margin: sol.i_g - limits.i_max });
    }
    out
}
