//! Cross-check of a simulated final window against the steady-state solver.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::Result;
use crate::metrics::{metrics, Summary, WindowStats};
use crate::signal::wrap_angle;
use crate::sim::run;
use crate::steady::{solve_steady, SteadySolution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative, per inverter.
    pub p: f64,
    /// Relative, per inverter.
    pub v: f64,
    /// Absolute.
    pub pf: f64,
    /// Absolute, rad.
    pub phi: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { p: 0.01, v: 0.02, pf: 0.01, phi: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    /// Quantity name such as `P_2` or `PF_pcc`.
    pub quantity: String,
    pub simulated: f64,
    pub expected: f64,
    /// Relative or absolute error, matching the tolerance kind.
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }

    /// Error as a fraction of the tolerance.
    pub fn severity(&self) -> f64 {
        self.error / self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub steady: SteadySolution,
    pub summary: Summary,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    /// Check with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&Check> {
        self.checks.iter().max_by(|a, b| a.severity().total_cmp(&b.severity()))
    }
}

fn rel(sim: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        sim.abs()
    } else {
        ((sim - exp) / exp).abs()
    }
}

/// Compares a final window with a steady solution.
pub fn compare(w: &WindowStats, s: &SteadySolution, tol: Tolerances) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |quantity: String, simulated: f64, expected: f64, error: f64, tolerance: f64| {
        checks.push(Check { quantity, simulated, expected, error, tolerance });
    };
    for k in 0..s.p.len() {
        push(format!("P_{}", k + 1), w.p[k], s.p[k], rel(w.p[k], s.p[k]), tol.p);
    }
    for k in 0..s.v.len() {
        push(format!("V_{}", k + 1), w.v[k], s.v[k], rel(w.v[k], s.v[k]), tol.v);
    }
    push("PF_pcc".into(), w.pf_pcc, s.pf_pcc, (w.pf_pcc - s.pf_pcc).abs(), tol.pf);
    for k in 0..s.phi.len() {
        push(format!("phi_{}", k + 1), w.phi[k], s.phi[k], wrap_angle(w.phi[k] - s.phi[k]).abs(), tol.phi);
    }
    checks
}

/// Runs the scenario and checks its final window against the solver.
pub fn verify(cfg: &Config, tol: Tolerances) -> Result<VerifyReport> {
    let steady = solve_steady(&cfg.final_steady_inputs())?;
    let trace = run(cfg)?;
    let summary = metrics(&trace, cfg)?;
    let checks = compare(summary.final_window(), &steady, tol);
    Ok(VerifyReport { checks, steady, summary })
}
