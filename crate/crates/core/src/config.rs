//! Experiment configuration: one JSON document describing plant, gains,
//! scenario, output and noise.
//!
//! Omitted fields are filled from `configs/defaults.json`, which is compiled in.
//! Loading merges the user document over the defaults and then deserializes
//! strictly, so unknown keys are rejected by name.

use std::f64::consts::TAU;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control::{GainSet, Nominal};
use crate::error::{Error, Result};
use crate::plant::PlantParams;
use crate::steady::SteadyInputs;

pub const DEFAULTS_JSON: &str = include_str!("../configs/defaults.json");

static DEFAULTS: LazyLock<Value> =
    LazyLock::new(|| serde_json::from_str(DEFAULTS_JSON).expect("bundled defaults.json is valid JSON"));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalConfig {
    /// Nominal grid voltage amplitude, V peak.
    #[serde(rename = "V_g")]
    pub v_g: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Zero current, controllers at their bias operating points.
    Cold,
    /// Controllers and plant preloaded with the analytic steady state.
    Steady,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// New power reference for a one-based inverter index.
    SetPowerRef { inverter: usize, watts: f64 },
    /// Grid amplitude becomes `factor` times the scenario's grid amplitude.
    GridSag { factor: f64 },
    /// Adds `radians` to the phase of a voltage-controlled inverter.
    PhasePerturb { inverter: usize, radians: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at: f64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    pub dt: f64,
    /// Initial power references, W, inverter-1 first.
    pub p_ref: Vec<f64>,
    pub phi_ref: f64,
    pub grid_amplitude: f64,
    pub grid_omega: f64,
    pub grid_phase0: f64,
    pub init: Init,
    /// Extra initial phase of inverters 2..n, radians; missing entries are zero.
    pub initial_phases: Vec<f64>,
    pub events: Vec<TimedEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Store every `decimation`-th step in the trace.
    pub decimation: usize,
    /// Length of the steady-state averaging windows, in fundamental periods.
    pub window_periods: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub seed: u64,
    /// Standard deviation of additive noise on measured voltages, V.
    pub voltage_std: f64,
    /// Standard deviation of additive noise on measured currents, A.
    pub current_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub plant: PlantParams,
    pub nominal: NominalConfig,
    pub gains: GainSet,
    pub scenario: Scenario,
    pub output: OutputConfig,
    pub noise: NoiseConfig,
}

impl Default for Config {
    fn default() -> Self {
        serde_json::from_value(DEFAULTS.clone()).expect("bundled defaults.json matches the schema")
    }
}

/// Error while reading a configuration document.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter { field, reason } => ConfigError::Field { path: field, message: reason },
            other => ConfigError::Syntax(other.to_string()),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dot separated, numeric segments index arrays) in a JSON tree.
pub fn apply_override(doc: &mut Value, assignment: &str) -> std::result::Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        let field_err = |msg: &str| ConfigError::Field { path: key.to_string(), message: msg.to_string() };
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| field_err("array index expected"))?;
                if idx > items.len() {
                    return Err(field_err("array index out of range"));
                }
                if idx == items.len() {
                    items.push(Value::Null);
                }
                if last {
                    items[idx] = value;
                    return Ok(());
                }
                &mut items[idx]
            }
            _ => return Err(field_err("cannot descend into a scalar")),
        };
    }
    Ok(())
}

impl Config {
    /// Parses a document, fills defaults, applies `key=value` overrides and validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> std::result::Result<Config, ConfigError> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| ConfigError::Syntax(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        if !user.is_object() {
            return Err(ConfigError::Syntax("top level must be a JSON object".into()));
        }
        let mut doc = DEFAULTS.clone();
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = serde_path_to_error::deserialize(doc)
            .map_err(|e| ConfigError::Field { path: e.path().to_string(), message: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn nominal(&self) -> Nominal {
        Nominal { voltage: self.nominal.v_g, omega: self.nominal.omega, n: self.plant.n }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        if !(s.dt > 0.0) || !s.dt.is_finite() {
            return Err(Error::invalid("scenario.dt", "must be positive"));
        }
        self.plant.validate(s.dt)?;
        if !(s.duration > 0.0) || !s.duration.is_finite() {
            return Err(Error::invalid("scenario.duration", "must be positive"));
        }
        if s.p_ref.len() != self.plant.n {
            return Err(Error::invalid(
                "scenario.p_ref",
                format!("expected {} entries, got {}", self.plant.n, s.p_ref.len()),
            ));
        }
        if s.p_ref.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("scenario.p_ref", "power references must be finite and non-negative"));
        }
        if !(s.phi_ref.cos() > 0.0) {
            return Err(Error::invalid("scenario.phi_ref", "cos(phi_ref) must be positive"));
        }
        if !(s.grid_amplitude >= 0.0) {
            return Err(Error::invalid("scenario.grid_amplitude", "must be non-negative"));
        }
        if !(s.grid_omega > 0.0) {
            return Err(Error::invalid("scenario.grid_omega", "must be positive"));
        }
        if s.initial_phases.len() > self.plant.n - 1 {
            return Err(Error::invalid("scenario.initial_phases", "at most n-1 entries"));
        }
        if !(self.nominal.v_g > 0.0) || !(self.nominal.omega > 0.0) {
            return Err(Error::invalid("nominal", "nominal voltage and frequency must be positive"));
        }
        let period = TAU / self.nominal.omega;
        let steps = period / s.dt;
        if ((steps - steps.round()) / steps).abs() > 1e-4 {
            return Err(Error::invalid("scenario.dt", "must divide the fundamental period to within 0.01%"));
        }
        if self.output.decimation == 0 {
            return Err(Error::invalid("output.decimation", "must be at least 1"));
        }
        if self.output.window_periods < 2 {
            return Err(Error::invalid("output.window_periods", "must be at least 2"));
        }
        let mut prev = 0.0;
        for (k, ev) in s.events.iter().enumerate() {
            let field = format!("scenario.events[{k}]");
            if !(ev.at >= 0.0 && ev.at <= s.duration) {
                return Err(Error::invalid(field, "event time outside [0, duration]"));
            }
            if ev.at < prev {
                return Err(Error::invalid(field, "events must be sorted by time"));
            }
            prev = ev.at;
            match ev.event {
                Event::SetPowerRef { inverter, watts } => {
                    if inverter < 1 || inverter > self.plant.n {
                        return Err(Error::invalid(field, "inverter index out of range"));
                    }
                    if !(watts.is_finite() && watts >= 0.0) {
                        return Err(Error::invalid(field, "power reference must be non-negative"));
                    }
                }
                Event::GridSag { factor } => {
                    if !(factor.is_finite() && factor >= 0.0) {
                        return Err(Error::invalid(field, "sag factor must be non-negative"));
                    }
                }
                Event::PhasePerturb { inverter, radians } => {
                    if inverter < 2 || inverter > self.plant.n {
                        return Err(Error::invalid(field, "only inverters 2..n can be phase-perturbed"));
                    }
                    if !radians.is_finite() {
                        return Err(Error::invalid(field, "perturbation must be finite"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Power references and grid amplitude in force after every event has fired.
    pub fn final_references(&self) -> (Vec<f64>, f64) {
        let mut p = self.scenario.p_ref.clone();
        let mut amplitude = self.scenario.grid_amplitude;
        for ev in &self.scenario.events {
            match ev.event {
                Event::SetPowerRef { inverter, watts } => p[inverter - 1] = watts,
                Event::GridSag { factor } => amplitude = factor * self.scenario.grid_amplitude,
                Event::PhasePerturb { .. } => {}
            }
        }
        (p, amplitude)
    }

    /// Steady-state problem for the final reference set.
    pub fn final_steady_inputs(&self) -> SteadyInputs {
        let (p_ref, v_grid) = self.final_references();
        SteadyInputs {
            p_ref,
            phi_ref: self.scenario.phi_ref,
            v_grid,
            omega: self.scenario.grid_omega,
            l_line: self.plant.l_line,
            r_line: self.plant.r_line,
        }
    }

    /// Steady-state problem for the initial reference set.
    pub fn initial_steady_inputs(&self) -> SteadyInputs {
        SteadyInputs {
            p_ref: self.scenario.p_ref.clone(),
            phi_ref: self.scenario.phi_ref,
            v_grid: self.scenario.grid_amplitude,
            omega: self.scenario.grid_omega,
            l_line: self.plant.l_line,
            r_line: self.plant.r_line,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_table_values() {
        let c = Config::default();
        assert_eq!(c.plant.n, 3);
        assert_eq!(c.plant.l_line, 0.3e-3);
        assert_eq!(c.nominal.v_g, 311.0);
        assert!((c.nominal.omega - 100.0 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(c.scenario.dt, 1e-4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn omitted_fields_take_defaults() {
        let c = Config::from_json_str(r#"{"plant": {"n": 4}, "scenario": {"p_ref": [1,2,3,4]}}"#, &[]).unwrap();
        assert_eq!(c.plant.n, 4);
        assert_eq!(c.plant.tau_i, Config::default().plant.tau_i);
        assert_eq!(c.gains, Config::default().gains);
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut c = Config::default();
        c.scenario.events.push(TimedEvent { at: 1.0, event: Event::GridSag { factor: 0.85 } });
        c.scenario.events.push(TimedEvent { at: 1.5, event: Event::PhasePerturb { inverter: 2, radians: -0.3 } });
        c.scenario.phi_ref = 0.128 * std::f64::consts::PI;
        let back = Config::from_json_str(&c.to_json_string(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn negative_inductance_names_the_field() {
        let err = Config::from_json_str(r#"{"plant": {"L_line": -0.001}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("plant.L_line"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_fields_are_named() {
        let err = Config::from_json_str(r#"{"plant": {"L": 0.001}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("plant"), "{err}");
        let err = Config::from_json_str(r#"{"scenario": {"duration": "long"}}"#, &[]).unwrap_err();
        assert!(err.to_string().contains("scenario.duration"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = Config::from_json_str("{\n\"plant\": {,}\n}", &[]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn overrides_apply_by_path() {
        let c = Config::from_json_str("{}", &["scenario.duration=0.5".into(), "scenario.p_ref.1=1300".into()]).unwrap();
        assert_eq!(c.scenario.duration, 0.5);
        assert_eq!(c.scenario.p_ref[1], 1300.0);
        assert!(Config::from_json_str("{}", &["scenario.duration".into()]).is_err());
    }

    #[test]
    fn event_validation() {
        let bad = r#"{"scenario": {"events": [{"at": 1.5, "kind": "grid_sag", "factor": 0.8}, {"at": 1.0, "kind": "grid_sag", "factor": 0.9}]}}"#;
        assert!(Config::from_json_str(bad, &[]).is_err());
        let bad = r#"{"scenario": {"events": [{"at": 1.0, "kind": "phase_perturb", "inverter": 1, "radians": 0.3}]}}"#;
        assert!(Config::from_json_str(bad, &[]).is_err());
        let bad = r#"{"scenario": {"dt": 0.00013}}"#;
        assert!(Config::from_json_str(bad, &[]).unwrap_err().to_string().contains("scenario.dt"));
    }

    #[test]
    fn final_references_apply_events() {
        let c = Config::from_json_str(
            r#"{"scenario": {"events": [
                {"at": 1.0, "kind": "set_power_ref", "inverter": 2, "watts": 1300},
                {"at": 1.0, "kind": "set_power_ref", "inverter": 3, "watts": 1100},
                {"at": 1.0, "kind": "grid_sag", "factor": 0.85}]}}"#,
            &[],
        )
        .unwrap();
        let (p, a) = c.final_references();
        assert_eq!(p, vec![1500.0, 1300.0, 1100.0]);
        assert!((a - 264.35).abs() < 1e-9);
    }
}
