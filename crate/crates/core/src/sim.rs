//! Fixed-step simulation of the string under its local controllers.
//!
//! Physics and control share one step. Per step: events fire, the grid voltage
//! is sampled, inverter-1 produces its current reference, inverters 2..n
//! produce their voltages, the current tracks its reference and inverter-1's
//! terminal voltage closes the loop equation.
//!
//! Trace quantities are measured by an independent set of estimators on the
//! plant waveforms, not taken from the controllers' own bookkeeping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Config, Event, Init};
use crate::control::{
    measure_pq, CurrentController, CurrentMeasurements, LocalController, VoltageController, VoltageMeasurements,
};
use crate::error::{Error, Result};
use crate::plant::{self, PlantState};
use crate::signal::{wrap_angle, FundamentalEstimator, Phasor};
use crate::steady::solve_steady;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InverterRecord {
    /// Instantaneous terminal voltage, V.
    pub u: f64,
    /// Measured fundamental amplitude, V peak.
    pub v: f64,
    /// Measured fundamental phase relative to `sin(omega* t)`.
    pub theta: f64,
    /// Controller frequency, rad/s (PLL frequency for inverter-1).
    pub omega: f64,
    pub p: f64,
    pub q: f64,
    /// `theta - theta_ig`.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub i_g: f64,
    pub u_pcc: f64,
    /// Measured grid-current amplitude, A peak.
    pub i_amp: f64,
    /// Measured grid-current phase relative to `sin(omega* t)`.
    pub theta_ig: f64,
    pub v_pcc: f64,
    pub theta_pcc: f64,
    /// Inverter-1's current amplitude command, A peak.
    pub i_cmd: f64,
    /// Inverter-1's PCC phase estimate relative to `sin(omega* t)`.
    pub theta_p: f64,
    pub inverters: Vec<InverterRecord>,
}

impl TraceRecord {
    /// Active and reactive power delivered into the grid at the PCC.
    pub fn pcc_pq(&self) -> (f64, f64) {
        measure_pq(Phasor::new(self.v_pcc, self.theta_pcc), Phasor::new(self.i_amp, self.theta_ig))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunViolation {
    OverVoltage { inverter: usize, first_t: f64, peak: f64, steps: usize },
    OverCurrent { first_t: f64, peak: f64, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEvent {
    pub step: usize,
    pub t: f64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub n: usize,
    pub dt: f64,
    pub decimation: usize,
    pub records: Vec<TraceRecord>,
    pub events: Vec<AppliedEvent>,
    pub violations: Vec<RunViolation>,
    /// Largest loop-equation residual over every step, V.
    pub max_kvl_residual: f64,
    pub steps: usize,
}

impl Trace {
    pub fn record_dt(&self) -> f64 {
        self.dt * self.decimation as f64
    }
}

/// Independent measurement of the plant waveforms.
#[derive(Debug, Clone)]
struct Observer {
    current: FundamentalEstimator,
    pcc: FundamentalEstimator,
    terminals: Vec<FundamentalEstimator>,
}

impl Observer {
    fn new(n: usize, omega: f64, dt: f64) -> Result<Self> {
        Ok(Observer {
            current: FundamentalEstimator::new(omega, dt)?,
            pcc: FundamentalEstimator::new(omega, dt)?,
            terminals: (0..n).map(|_| FundamentalEstimator::new(omega, dt)).collect::<Result<_>>()?,
        })
    }

    fn push(&mut self, state: &PlantState, t: f64) -> (Phasor, Phasor, Vec<Phasor>) {
        let i = self.current.push(state.i_g, t).phasor();
        let pcc = self.pcc.push(state.u_pcc, t).phasor();
        let terms = self.terminals.iter_mut().zip(&state.u_terms).map(|(e, &u)| e.push(u, t).phasor()).collect();
        (i, pcc, terms)
    }

    /// Loads one period of steady waveform history ending just before t = 0.
    fn preload(&mut self, current: Phasor, pcc: Phasor, terms: &[Phasor], omega: f64, dt: f64) {
        let n = self.current.window_len() as i64;
        for k in -n..0 {
            let t = k as f64 * dt;
            self.current.push(current.sample(t, omega), t);
            self.pcc.push(pcc.sample(t, omega), t);
            for (e, ph) in self.terminals.iter_mut().zip(terms) {
                e.push(ph.sample(t, omega), t);
            }
        }
    }
}

struct Noise {
    rng: ChaCha8Rng,
    voltage: Option<Normal<f64>>,
    current: Option<Normal<f64>>,
}

impl Noise {
    fn new(cfg: &Config) -> Self {
        let dist = |std: f64| (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"));
        Noise {
            rng: ChaCha8Rng::seed_from_u64(cfg.noise.seed),
            voltage: dist(cfg.noise.voltage_std),
            current: dist(cfg.noise.current_std),
        }
    }

    fn voltage(&mut self, x: f64) -> f64 {
        match &self.voltage {
            Some(d) => x + d.sample(&mut self.rng),
            None => x,
        }
    }

    fn current(&mut self, x: f64) -> f64 {
        match &self.current {
            Some(d) => x + d.sample(&mut self.rng),
            None => x,
        }
    }
}

/// Stepwise simulator; [`run`] drives it to completion.
pub struct Simulator {
    cfg: Config,
    state: PlantState,
    ctrl1: CurrentController,
    others: Vec<VoltageController>,
    observer: Observer,
    noise: Noise,
    grid_amplitude: f64,
    step: usize,
    total_steps: usize,
    u1_prev: f64,
    pending: Vec<(usize, Event)>,
    trace: Trace,
}

impl Simulator {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.scenario;
        let p = &cfg.plant;
        let dt = s.dt;
        let nominal = cfg.nominal();
        let mut ctrl1 = CurrentController::new(nominal, &cfg.gains, s.p_ref[0], s.phi_ref, p.i_max, p.tau_i, dt)?;
        let mut others = (1..p.n)
            .map(|k| VoltageController::new(k + 1, nominal, &cfg.gains, s.p_ref[k], s.phi_ref, p.v_max, dt))
            .collect::<Result<Vec<_>>>()?;

        let mut state = PlantState::new(p.n);
        let omega = s.grid_omega;
        let mut u1_prev = 0.0;
        let mut observer = Observer::new(p.n, cfg.nominal.omega, dt)?;
        match s.init {
            Init::Cold => {
                for (k, c) in others.iter_mut().enumerate() {
                    c.set_theta(s.grid_phase0 + s.initial_phases.get(k).copied().unwrap_or(0.0));
                }
            }
            Init::Steady => {
                let sol = solve_steady(&cfg.initial_steady_inputs())?;
                let at = |ph: Phasor| Phasor::new(ph.amplitude, ph.phase + s.grid_phase0);
                let current = at(sol.current());
                let pcc = Phasor::new(s.grid_amplitude, s.grid_phase0);
                let u1 = at(sol.voltage(0));
                ctrl1.preload(sol.i_g, pcc, current, u1);
                for (k, c) in others.iter_mut().enumerate() {
                    let offset = s.initial_phases.get(k).copied().unwrap_or(0.0);
                    c.preload(sol.v[k + 1], s.grid_phase0 + sol.theta[k + 1] + offset, current);
                }
                state.i_g = current.sample(0.0, omega);
                u1_prev = u1.sample(-dt, omega);
                let terms: Vec<Phasor> = (0..p.n).map(|k| at(sol.voltage(k))).collect();
                observer.preload(current, pcc, &terms, omega, dt);
            }
        }

        let total_steps = (s.duration / dt).round() as usize;
        let pending = s.events.iter().map(|e| (((e.at / dt) - 1e-9).ceil().max(0.0) as usize, e.event)).collect();
        Ok(Simulator {
            observer,
            noise: Noise::new(cfg),
            grid_amplitude: s.grid_amplitude,
            cfg: cfg.clone(),
            state,
            ctrl1,
            others,
            step: 0,
            total_steps,
            u1_prev,
            pending,
            trace: Trace { n: p.n, dt, decimation: cfg.output.decimation, ..Default::default() },
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.scenario.dt
    }

    pub fn is_done(&self) -> bool {
        self.step > self.total_steps
    }

    pub fn current_controller(&self) -> &CurrentController {
        &self.ctrl1
    }

    pub fn voltage_controllers(&self) -> &[VoltageController] {
        &self.others
    }

    pub fn plant_state(&self) -> &PlantState {
        &self.state
    }

    fn apply(&mut self, event: Event) {
        match event {
            Event::SetPowerRef { inverter: 1, watts } => self.ctrl1.set_power_ref(watts),
            Event::SetPowerRef { inverter, watts } => self.others[inverter - 2].set_power_ref(watts),
            Event::GridSag { factor } => self.grid_amplitude = factor * self.cfg.scenario.grid_amplitude,
            Event::PhasePerturb { inverter, radians } => self.others[inverter - 2].perturb_phase(radians),
        }
    }

    /// Advances one step; the returned record describes the instant just simulated.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let k = self.step;
        let (dt, grid_omega, grid_phase0) = {
            let s = &self.cfg.scenario;
            (s.dt, s.grid_omega, s.grid_phase0)
        };
        let t = k as f64 * dt;

        let mut fired = Vec::new();
        self.pending.retain(|&(at, ev)| {
            if at <= k {
                fired.push(ev);
                false
            } else {
                true
            }
        });
        for ev in fired {
            self.apply(ev);
            self.trace.events.push(AppliedEvent { step: k, t, event: ev });
        }

        self.state.theta_g = grid_omega * t + grid_phase0;
        self.state.u_pcc = plant::grid_voltage(t, self.grid_amplitude, grid_omega, grid_phase0);

        let m1 = CurrentMeasurements {
            u_pcc: self.noise.voltage(self.state.u_pcc),
            i_g: self.noise.current(self.state.i_g),
            u_1: self.noise.voltage(self.u1_prev),
        };
        let i_ref = self.ctrl1.step(m1, dt).map_err(|_| Error::NanAbort { step: k, channel: "i_ref" })?;
        let mut sum_others = 0.0;
        for (idx, c) in self.others.iter_mut().enumerate() {
            let m = VoltageMeasurements { i_g: self.noise.current(self.state.i_g) };
            let u = c.step(m, dt).map_err(|_| Error::NanAbort { step: k, channel: "u_i" })?;
            self.state.u_terms[idx + 1] = u;
            sum_others += u;
        }

        let params = &self.cfg.plant;
        let di_dt = plant::tracking_slope(self.state.i_g, i_ref, params.tau_i);
        let u1 = plant::inverter1_terminal_voltage(params, self.state.i_g, self.state.u_pcc, sum_others, di_dt);
        self.state.u_terms[0] = u1;
        let residual = plant::kvl_residual(params, &self.state, di_dt).abs();
        let params = params.clone();
        if !residual.is_finite() {
            return Err(Error::NanAbort { step: k, channel: "kvl" });
        }
        self.trace.max_kvl_residual = self.trace.max_kvl_residual.max(residual);

        self.check_limits(t);

        let (i_ph, pcc_ph, terms) = self.observer.push(&self.state, t);
        let c1 = self.ctrl1.state();
        let omega_nom = self.cfg.nominal.omega;
        let inverters = terms
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let (p, q) = measure_pq(*v, i_ph);
                let omega = if idx == 0 { c1.omega_pll } else { self.others[idx - 1].state().omega };
                InverterRecord {
                    u: self.state.u_terms[idx],
                    v: v.amplitude,
                    theta: v.phase,
                    omega,
                    p,
                    q,
                    phi: wrap_angle(v.phase - i_ph.phase),
                }
            })
            .collect();
        let record = TraceRecord {
            t,
            i_g: self.state.i_g,
            u_pcc: self.state.u_pcc,
            i_amp: i_ph.amplitude,
            theta_ig: i_ph.phase,
            v_pcc: pcc_ph.amplitude,
            theta_pcc: pcc_ph.phase,
            i_cmd: c1.i_cmd,
            theta_p: wrap_angle(c1.theta_p - omega_nom * t),
            inverters,
        };
        if !record_is_finite(&record) {
            return Err(Error::NanAbort { step: k, channel: "trace" });
        }
        if k.is_multiple_of(self.cfg.output.decimation) {
            self.trace.records.push(record.clone());
        }

        plant::track_current(&mut self.state, &params, i_ref, dt)
            .map_err(|_| Error::NanAbort { step: k, channel: "i_g" })?;
        self.u1_prev = u1;
        self.step += 1;
        self.trace.steps = self.step;
        Ok(record)
    }

    fn check_limits(&mut self, t: f64) {
        let p = &self.cfg.plant;
        let u1 = self.state.u_terms[0].abs();
        if u1 > p.v_max {
            bump(
                &mut self.trace.violations,
                u1,
                |v| matches!(v, RunViolation::OverVoltage { inverter: 1, .. }),
                || RunViolation::OverVoltage { inverter: 1, first_t: t, peak: u1, steps: 0 },
            );
        }
        let i = self.state.i_g.abs();
        if i > p.i_max {
            bump(
                &mut self.trace.violations,
                i,
                |v| matches!(v, RunViolation::OverCurrent { .. }),
                || RunViolation::OverCurrent { first_t: t, peak: i, steps: 0 },
            );
        }
    }

    pub fn finish(self) -> Trace {
        self.trace
    }
}

fn bump(
    list: &mut Vec<RunViolation>,
    value: f64,
    matches: impl Fn(&RunViolation) -> bool,
    create: impl FnOnce() -> RunViolation,
) {
    let idx = match list.iter().position(matches) {
        Some(i) => i,
        None => {
            list.push(create());
            list.len() - 1
        }
    };
    match &mut list[idx] {
        RunViolation::OverVoltage { peak, steps, .. } | RunViolation::OverCurrent { peak, steps, .. } => {
            *peak = peak.max(value);
            *steps += 1;
        }
    }
}

fn record_is_finite(r: &TraceRecord) -> bool {
    [r.i_g, r.u_pcc, r.i_amp, r.theta_ig, r.v_pcc, r.theta_pcc, r.i_cmd, r.theta_p].iter().all(|x| x.is_finite())
        && r.inverters.iter().all(|v| [v.u, v.v, v.theta, v.omega, v.p, v.q, v.phi].iter().all(|x| x.is_finite()))
}

/// Runs a scenario to completion. Identical configs give bit-identical traces;
/// the noise seed only matters when measurement noise is enabled.
pub fn run(cfg: &Config) -> Result<Trace> {
    let mut sim = Simulator::new(cfg)?;
    while !sim.is_done() {
        sim.step()?;
    }
    Ok(sim.finish())
}
