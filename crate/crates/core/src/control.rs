//! Local controllers of the cascaded string.
//!
//! Inverter-1 is a current source: a PLL locks onto the PCC voltage and a power
//! PI sets the grid-current amplitude, with the current phase placed `phi_ref`
//! behind the PCC voltage. Every other inverter is a voltage source whose
//! amplitude follows a power PI and whose frequency follows a PI on its own
//! power-factor angle, measured against the shared grid current. The voltage
//! controllers see nothing but the grid current.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{wrap_angle, Estimate, FundamentalEstimator, Phasor, PiBlock};

/// Active and reactive power of a voltage/current phasor pair (peak amplitudes).
pub fn measure_pq(v: Phasor, i: Phasor) -> (f64, f64) {
    let s = 0.5 * v.amplitude * i.amplitude;
    let angle = v.phase - i.phase;
    (s * angle.cos(), s * angle.sin())
}

const W_PER_KW: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PllGains {
    pub kp: f64,
    pub ki: f64,
    /// Damping gain of the quadrature generator.
    pub sogi_k: f64,
}

/// Gains of all local loops. Power errors enter the loops in kW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    /// Inverter-1 power loop, A per kW.
    pub current: PiGains,
    /// Amplitude (P-V) loop, V per kW.
    pub amplitude: PiGains,
    /// Frequency (PF angle) loop, rad/s per rad.
    pub frequency: PiGains,
    pub pll: PllGains,
    /// Pre-compensate the known lag of inverter-1's current tracking.
    pub lag_compensation: bool,
}

/// Nominal grid values every controller is configured with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nominal {
    /// Nominal grid voltage, V peak.
    pub voltage: f64,
    /// Nominal angular frequency, rad/s.
    pub omega: f64,
    pub n: usize,
}

/// Second-order generalized integrator at a fixed frequency, Tustin-discretized
/// with prewarping so that the in-phase output has unity gain and the quadrature
/// output lags by exactly 90 degrees at the nominal frequency.
#[derive(Debug, Clone)]
struct Sogi {
    // x_{k+1} = a x_k + b (u_k + u_{k+1})
    a: [[f64; 2]; 2],
    b: [f64; 2],
    x: [f64; 2],
    prev_input: f64,
}

impl Sogi {
    fn new(omega: f64, k: f64, dt: f64) -> Self {
        let w = 2.0 / dt * (omega * dt / 2.0).tan();
        let h = dt / 2.0;
        // continuous A = [[-k w, -w], [w, 0]], B = [k w, 0]
        let am = [[-k * w, -w], [w, 0.0]];
        let lhs = [[1.0 - h * am[0][0], -h * am[0][1]], [-h * am[1][0], 1.0 - h * am[1][1]]];
        let rhs = [[1.0 + h * am[0][0], h * am[0][1]], [h * am[1][0], 1.0 + h * am[1][1]]];
        let det = lhs[0][0] * lhs[1][1] - lhs[0][1] * lhs[1][0];
        let inv = [[lhs[1][1] / det, -lhs[0][1] / det], [-lhs[1][0] / det, lhs[0][0] / det]];
        let mut a = [[0.0; 2]; 2];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = inv[r][0] * rhs[0][c] + inv[r][1] * rhs[1][c];
            }
        }
        let bc = [k * w * h, 0.0];
        let b = [inv[0][0] * bc[0] + inv[0][1] * bc[1], inv[1][0] * bc[0] + inv[1][1] * bc[1]];
        Sogi { a, b, x: [0.0; 2], prev_input: 0.0 }
    }

    fn step(&mut self, u: f64) -> (f64, f64) {
        let drive = u + self.prev_input;
        let x = self.x;
        self.x = [
            self.a[0][0] * x[0] + self.a[0][1] * x[1] + self.b[0] * drive,
            self.a[1][0] * x[0] + self.a[1][1] * x[1] + self.b[1] * drive,
        ];
        self.prev_input = u;
        (self.x[0], self.x[1])
    }
}

/// SOGI-based single-phase PLL with an amplitude-normalized phase detector.
#[derive(Debug, Clone)]
pub struct Pll {
    sogi: Sogi,
    sogi_k: f64,
    loop_pi: PiBlock,
    omega_nom: f64,
    dt: f64,
    theta: f64,
    omega: f64,
}

impl Pll {
    pub fn new(omega_nom: f64, gains: PllGains, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        Ok(Pll {
            sogi: Sogi::new(omega_nom, gains.sogi_k, dt),
            sogi_k: gains.sogi_k,
            loop_pi: PiBlock::new(gains.kp, gains.ki, 0.5 * omega_nom, 1.5 * omega_nom).with_bias(omega_nom),
            omega_nom,
            dt,
            theta: 0.0,
            omega: omega_nom,
        })
    }

    /// Phase estimate at the most recent sample.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Consumes one PCC voltage sample and returns the phase estimate for that
    /// sample instant. The internal phase is then advanced to the next sample.
    pub fn step(&mut self, u: f64, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        if dt != self.dt {
            let state = (self.sogi.x, self.sogi.prev_input);
            self.sogi = Sogi::new(self.omega_nom, self.sogi_k, dt);
            (self.sogi.x, self.sogi.prev_input) = state;
            self.dt = dt;
        }
        let (alpha, beta) = self.sogi.step(u);
        let mag = alpha.hypot(beta);
        // alpha = V sin(theta), beta = -V cos(theta)
        let (s, c) = self.theta.sin_cos();
        let err = if mag > 1e-9 { (alpha * c + beta * s) / mag } else { 0.0 };
        let estimate = self.theta;
        self.omega = self.loop_pi.step(err, dt)?;
        self.theta = wrap_angle(self.theta + self.omega * dt);
        Ok(estimate)
    }

    /// Places the PLL in lock with `amplitude * sin(theta)` where `theta` is the
    /// phase of the next sample to be pushed.
    pub fn lock_to(&mut self, amplitude: f64, theta: f64) {
        let prev = theta - self.omega_nom * self.dt;
        self.sogi.x = [amplitude * prev.sin(), -amplitude * prev.cos()];
        self.sogi.prev_input = amplitude * prev.sin();
        self.loop_pi.integral = 0.0;
        self.omega = self.omega_nom;
        self.theta = wrap_angle(theta);
    }
}

/// Signals available to inverter-1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentMeasurements {
    pub u_pcc: f64,
    pub i_g: f64,
    /// Own terminal voltage from the previous sample.
    pub u_1: f64,
}

/// Signals available to inverters 2..n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageMeasurements {
    pub i_g: f64,
}

/// A controller that runs on locally measured signals only.
pub trait LocalController {
    type Inputs;
    /// Consumes one sample of local measurements, returns the actuation sample.
    fn step(&mut self, inputs: Self::Inputs, dt: f64) -> Result<f64>;
}

/// Snapshot of inverter-1's controller after a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurrentControllerState {
    /// Commanded grid-current amplitude, A peak.
    pub i_cmd: f64,
    /// PCC phase estimate (absolute, wrapped).
    pub theta_p: f64,
    pub omega_pll: f64,
    pub p: f64,
    pub q: f64,
    pub ready: bool,
}

/// Inverter-1: grid-current reference generator.
#[derive(Debug, Clone)]
pub struct CurrentController {
    power_pi: PiBlock,
    pll: Pll,
    p_ref: f64,
    phi_ref: f64,
    est_i: FundamentalEstimator,
    est_u1: FundamentalEstimator,
    omega_nom: f64,
    dt: f64,
    compensation: Complex64,
    samples: i64,
    ramp_len: usize,
    state: CurrentControllerState,
}

impl CurrentController {
    /// `tau_i` is the time constant of the module's own current tracking, used
    /// for lag pre-compensation when enabled.
    pub fn new(
        nominal: Nominal,
        gains: &GainSet,
        p_ref: f64,
        phi_ref: f64,
        i_max: f64,
        tau_i: f64,
        dt: f64,
    ) -> Result<Self> {
        let est_i = FundamentalEstimator::new(nominal.omega, dt)?;
        let ramp_len = est_i.window_len();
        let compensation = if gains.lag_compensation {
            // inverse of the sampled first-order tracking response at the nominal frequency
            let a = dt / tau_i;
            (Complex64::from_polar(1.0, nominal.omega * dt) - (1.0 - a)) / a
        } else {
            Complex64::new(1.0, 0.0)
        };
        Ok(CurrentController {
            power_pi: PiBlock::new(gains.current.kp, gains.current.ki, 0.0, i_max),
            pll: Pll::new(nominal.omega, gains.pll, dt)?,
            p_ref,
            phi_ref,
            est_i,
            est_u1: FundamentalEstimator::new(nominal.omega, dt)?,
            omega_nom: nominal.omega,
            dt,
            compensation,
            samples: 0,
            ramp_len,
            state: CurrentControllerState::default(),
        })
    }

    pub fn set_power_ref(&mut self, watts: f64) {
        self.p_ref = watts;
    }

    pub fn power_ref(&self) -> f64 {
        self.p_ref
    }

    pub fn phi_ref(&self) -> f64 {
        self.phi_ref
    }

    pub fn state(&self) -> CurrentControllerState {
        self.state
    }

    pub fn power_pi(&self) -> &PiBlock {
        &self.power_pi
    }

    /// Starts the controller inside a steady operating point: integral preset to
    /// `i_cmd`, PLL locked, and one period of history loaded into the estimators.
    pub fn preload(&mut self, i_cmd: f64, u_pcc: Phasor, i_g: Phasor, u_1: Phasor) {
        self.power_pi.integral = i_cmd - self.power_pi.bias;
        let n = self.est_i.window_len() as i64;
        for k in -n..0 {
            let t = k as f64 * self.dt;
            self.est_i.push(i_g.sample(t, self.omega_nom), t);
        }
        for k in (-n - 1)..-1 {
            let t = k as f64 * self.dt;
            self.est_u1.push(u_1.sample(t, self.omega_nom), t);
        }
        self.pll.lock_to(u_pcc.amplitude, u_pcc.phase);
        let (p, q) = measure_pq(u_1, i_g);
        self.state =
            CurrentControllerState { i_cmd, theta_p: u_pcc.phase, omega_pll: self.omega_nom, p, q, ready: true };
        self.samples = 0;
    }

    fn time(&self, offset: i64) -> f64 {
        (self.samples + offset) as f64 * self.dt
    }
}

impl LocalController for CurrentController {
    type Inputs = CurrentMeasurements;

    fn step(&mut self, m: CurrentMeasurements, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        if !(m.u_pcc.is_finite() && m.i_g.is_finite() && m.u_1.is_finite()) {
            return Err(Error::NonFinite("inverter-1 measurement"));
        }
        let t = self.time(0);
        let i_est = self.est_i.push(m.i_g, t);
        let u_est = if self.samples > 0 || self.state.ready {
            self.est_u1.push(m.u_1, self.time(-1))
        } else {
            self.est_u1.last()
        };
        let theta_p = self.pll.step(m.u_pcc, dt)?;

        let i_cmd = match (i_est, u_est) {
            (Estimate::Ready(i), Estimate::Ready(u)) => {
                let (p, q) = measure_pq(u, i);
                self.state.p = p;
                self.state.q = q;
                self.state.ready = true;
                self.power_pi.step((self.p_ref - p) / W_PER_KW, dt)?
            }
            _ => {
                let ramp = (self.samples.max(0) as f64 / self.ramp_len as f64).min(1.0);
                self.power_pi.held_output() * ramp
            }
        };
        self.state.i_cmd = i_cmd;
        self.state.theta_p = theta_p;
        self.state.omega_pll = self.pll.omega();
        self.samples += 1;

        // theta_Ig = theta_p - phi_ref, advanced by the lag compensation
        let phase = theta_p - self.phi_ref + self.compensation.arg();
        Ok(self.compensation.norm() * i_cmd * phase.sin())
    }
}

/// Snapshot of a voltage-controlled inverter after a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoltageControllerState {
    /// Amplitude command, V peak.
    pub v: f64,
    /// Own phase at the last output sample (absolute, wrapped).
    pub theta: f64,
    pub omega: f64,
    /// Grid-current phasor as estimated locally.
    pub current: Phasor,
    /// Absolute phase of the grid current at the last sample.
    pub theta_ig: f64,
    pub phi: f64,
    pub p: f64,
    pub q: f64,
    pub ready: bool,
}

/// Inverter-i (i >= 2): amplitude and frequency controller.
#[derive(Debug, Clone)]
pub struct VoltageController {
    index: usize,
    amplitude_pi: PiBlock,
    frequency_pi: PiBlock,
    theta: f64,
    p_ref: f64,
    phi_ref: f64,
    est_i: FundamentalEstimator,
    omega_nom: f64,
    dt: f64,
    samples: i64,
    state: VoltageControllerState,
}

impl VoltageController {
    pub fn new(
        index: usize,
        nominal: Nominal,
        gains: &GainSet,
        p_ref: f64,
        phi_ref: f64,
        v_max: f64,
        dt: f64,
    ) -> Result<Self> {
        let v_bias = nominal.voltage / nominal.n as f64;
        let amplitude_pi = PiBlock::new(gains.amplitude.kp, gains.amplitude.ki, 0.0, v_max).with_bias(v_bias);
        let frequency_pi =
            PiBlock::new(gains.frequency.kp, gains.frequency.ki, 0.9 * nominal.omega, 1.1 * nominal.omega)
                .with_bias(nominal.omega);
        let state = VoltageControllerState {
            v: amplitude_pi.held_output(),
            omega: frequency_pi.held_output(),
            ..Default::default()
        };
        Ok(VoltageController {
            index,
            amplitude_pi,
            frequency_pi,
            theta: 0.0,
            p_ref,
            phi_ref,
            est_i: FundamentalEstimator::new(nominal.omega, dt)?,
            omega_nom: nominal.omega,
            dt,
            samples: 0,
            state,
        })
    }

    /// One-based position in the string.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn set_power_ref(&mut self, watts: f64) {
        self.p_ref = watts;
    }

    pub fn power_ref(&self) -> f64 {
        self.p_ref
    }

    /// Phase the next output sample will use.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Sets the phase of the next output sample.
    pub fn set_theta(&mut self, theta: f64) {
        self.theta = wrap_angle(theta);
    }

    /// Shifts the phase of the next output sample.
    pub fn perturb_phase(&mut self, delta: f64) {
        self.theta = wrap_angle(self.theta + delta);
    }

    pub fn state(&self) -> VoltageControllerState {
        self.state
    }

    pub fn amplitude_pi(&self) -> &PiBlock {
        &self.amplitude_pi
    }

    pub fn frequency_pi(&self) -> &PiBlock {
        &self.frequency_pi
    }

    /// Starts inside a steady operating point: amplitude integral preset to `v`,
    /// phase set to `theta` for the first output sample, one period of the
    /// grid-current history loaded.
    pub fn preload(&mut self, v: f64, theta: f64, i_g: Phasor) {
        self.amplitude_pi.integral = v - self.amplitude_pi.bias;
        self.frequency_pi.integral = 0.0;
        self.theta = wrap_angle(theta);
        let n = self.est_i.window_len() as i64;
        for k in -n..0 {
            let t = k as f64 * self.dt;
            self.est_i.push(i_g.sample(t, self.omega_nom), t);
        }
        self.samples = 0;
        self.state.v = self.amplitude_pi.held_output();
        self.state.omega = self.frequency_pi.held_output();
    }
}

impl LocalController for VoltageController {
    type Inputs = VoltageMeasurements;

    fn step(&mut self, m: VoltageMeasurements, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        if !m.i_g.is_finite() {
            return Err(Error::NonFinite("grid current measurement"));
        }
        let t = self.samples as f64 * self.dt;
        let est = self.est_i.push(m.i_g, t);
        let theta = self.theta;
        let (v, omega) = match est {
            Estimate::Ready(current) => {
                let theta_ig = wrap_angle(self.omega_nom * t + current.phase);
                let phi = wrap_angle(theta - theta_ig);
                // own amplitude is known exactly; only the current is estimated
                let held = Phasor { amplitude: self.state.v, phase: 0.0 };
                let (p, q) = measure_pq(held, Phasor { amplitude: current.amplitude, phase: -phi });
                let v = self.amplitude_pi.step((self.p_ref - p) / W_PER_KW, dt)?;
                let omega = self.frequency_pi.step(self.phi_ref - phi, dt)?;
                self.state.current = current;
                self.state.theta_ig = theta_ig;
                self.state.phi = phi;
                self.state.p = p;
                self.state.q = q;
                self.state.ready = true;
                (v, omega)
            }
            Estimate::WarmingUp(_) => (self.amplitude_pi.held_output(), self.frequency_pi.held_output()),
        };
        self.state.v = v;
        self.state.omega = omega;
        self.state.theta = theta;
        self.theta = wrap_angle(theta + omega * dt);
        self.samples += 1;
        Ok(v * theta.sin())
    }
}

/// Period of the nominal fundamental.
pub fn nominal_period(omega: f64) -> f64 {
    TAU / omega
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::steady::{solve_steady, SteadyInputs};
    use std::f64::consts::PI;

    const W: f64 = 100.0 * PI;
    const DT: f64 = 1e-4;

    fn gains() -> GainSet {
        Config::default().gains
    }

    fn nominal() -> Nominal {
        Nominal { voltage: 311.0, omega: W, n: 3 }
    }

    fn phase_error(est: f64, truth: f64) -> f64 {
        wrap_angle(est - truth).abs()
    }

    #[test]
    fn pll_locks_to_nominal_grid() {
        let mut pll = Pll::new(W, gains().pll, DT).unwrap();
        for k in 0..4000 {
            let t = k as f64 * DT;
            let est = pll.step(311.0 * (W * t).sin(), DT).unwrap();
            if t >= 0.1 {
                assert!(phase_error(est, W * t) < 0.01, "t={t}: {}", phase_error(est, W * t));
            }
        }
        assert!((pll.omega() - W).abs() < 0.5);
    }

    #[test]
    fn pll_rides_through_amplitude_step() {
        let mut pll = Pll::new(W, gains().pll, DT).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..15000 {
            let t = k as f64 * DT;
            let amp = if t >= 1.0 { 264.35 } else { 311.0 };
            let err = phase_error(pll.step(amp * (W * t).sin(), DT).unwrap(), W * t);
            if t >= 0.2 {
                worst = worst.max(err);
            }
            if t >= 1.1 {
                assert!(err < 0.01, "t={t}: {err}");
            }
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn pll_locks_to_phase_offset() {
        let mut pll = Pll::new(W, gains().pll, DT).unwrap();
        let mut est = 0.0;
        let mut t = 0.0;
        for k in 0..5000 {
            t = k as f64 * DT;
            est = pll.step(311.0 * (W * t + 1.0).sin(), DT).unwrap();
        }
        assert!((wrap_angle(est - W * t) - 1.0).abs() < 0.01);
    }

    #[test]
    fn pll_rejects_bad_step() {
        let mut pll = Pll::new(W, gains().pll, DT).unwrap();
        assert!(pll.step(1.0, 0.0).is_err());
        assert!(Pll::new(W, gains().pll, -1.0).is_err());
    }

    /// Period average of v(t) i(t) and of v(t) times the in-quadrature current.
    fn integrated_pq(v: Phasor, i: Phasor) -> (f64, f64) {
        let steps = 100_000;
        let dt = TAU / W / steps as f64;
        let (mut p, mut q) = (0.0, 0.0);
        for k in 0..steps {
            let t = (k as f64 + 0.5) * dt;
            let u = v.sample(t, W);
            p += u * i.sample(t, W);
            q += u * i.amplitude * (W * t + i.phase).cos();
        }
        (p / steps as f64, q / steps as f64)
    }

    #[test]
    fn measure_pq_examples() {
        let cases = [
            (Phasor::new(119.6, 0.0), Phasor::new(25.08, 0.0)),
            (Phasor::new(100.0, 0.128 * PI), Phasor::new(20.0, 0.0)),
            (Phasor::new(80.0, -0.7), Phasor::new(12.0, 1.1)),
        ];
        for (v, i) in cases {
            let (p, q) = measure_pq(v, i);
            let (pi, qi) = integrated_pq(v, i);
            assert!((p - pi).abs() < 1e-6 * (1.0 + pi.abs()), "{p} {pi}");
            assert!((q - qi).abs() < 1e-6 * (1.0 + qi.abs()), "{q} {qi}");
        }
        let (p, q) = measure_pq(cases[0].0, cases[0].1);
        assert!((p - 1500.0).abs() < 1.0 && q.abs() < 1e-9);
        let (p, q) = measure_pq(cases[1].0, cases[1].1);
        assert!((p - 920.3).abs() < 0.1 && (q - 391.4).abs() < 0.05);
        assert!((q / p - (0.128 * PI).tan()).abs() < 1e-12);
        assert_eq!(measure_pq(Phasor::new(311.0, 0.4), Phasor::new(0.0, 0.0)), (0.0, 0.0));
    }

    fn uncompensated() -> GainSet {
        GainSet { lag_compensation: false, ..gains() }
    }

    #[test]
    fn current_controller_holds_fixed_point() {
        let (u1, ig) = (Phasor::new(119.6, 0.0), Phasor::new(25.08, 0.0));
        let p1 = measure_pq(u1, ig).0;
        let mut c = CurrentController::new(nominal(), &uncompensated(), p1, 0.0, 60.0, 0.5e-3, DT).unwrap();
        c.preload(25.08, Phasor::new(311.0, 0.0), ig, u1);
        for k in 0..10000 {
            let t = k as f64 * DT;
            let m =
                CurrentMeasurements { u_pcc: 311.0 * (W * t).sin(), i_g: ig.sample(t, W), u_1: u1.sample(t - DT, W) };
            let out = c.step(m, DT).unwrap();
            let s = c.state();
            assert!((s.i_cmd - 25.08).abs() < 1e-6, "step {k}: {}", s.i_cmd);
            assert!((out - s.i_cmd * s.theta_p.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn current_controller_idle_outputs_zero() {
        let mut c = CurrentController::new(nominal(), &gains(), 0.0, 0.0, 60.0, 0.5e-3, DT).unwrap();
        for _ in 0..1000 {
            let out = c.step(CurrentMeasurements { u_pcc: 0.0, i_g: 0.0, u_1: 0.0 }, DT).unwrap();
            assert_eq!(out, 0.0);
        }
    }

    #[test]
    fn current_reference_lags_pll_by_phi_ref() {
        let phi = 0.128 * PI;
        let mut c = CurrentController::new(nominal(), &uncompensated(), 0.0, phi, 60.0, 0.5e-3, DT).unwrap();
        c.preload(20.0, Phasor::new(311.0, 0.0), Phasor::new(20.0, -phi), Phasor::new(100.0, 0.0));
        let mut est = FundamentalEstimator::new(W, DT).unwrap();
        let mut last = None;
        for k in 0..4000 {
            let t = k as f64 * DT;
            let m = CurrentMeasurements { u_pcc: 311.0 * (W * t).sin(), i_g: 20.0 * (W * t - phi).sin(), u_1: 0.0 };
            let out = c.step(m, DT).unwrap();
            let s = c.state();
            // exact construction: I_g sin(theta_p - phi_ref)
            assert!((out - s.i_cmd * (s.theta_p - phi).sin()).abs() < 1e-9);
            last = Some(est.push(out, t));
        }
        let ph = last.unwrap().phasor();
        assert!((wrap_angle(ph.phase) + phi).abs() < 0.01, "{}", ph.phase);
    }

    #[test]
    fn lag_compensation_restores_tracked_phase() {
        // drive the first-order tracking law with the compensated reference
        let tau = 0.5e-3;
        let mut c = CurrentController::new(nominal(), &gains(), 0.0, 0.0, 60.0, tau, DT).unwrap();
        c.preload(20.0, Phasor::new(311.0, 0.0), Phasor::new(20.0, 0.0), Phasor::new(100.0, 0.0));
        let mut i = 0.0;
        let mut est = FundamentalEstimator::new(W, DT).unwrap();
        let mut last = None;
        for k in 0..4000 {
            let t = k as f64 * DT;
            let out = c.step(CurrentMeasurements { u_pcc: 311.0 * (W * t).sin(), i_g: i, u_1: 0.0 }, DT).unwrap();
            last = Some(est.push(i, t));
            i += DT / tau * (out - i);
        }
        let ph = last.unwrap().phasor();
        assert!(wrap_angle(ph.phase).abs() < 0.01, "{}", ph.phase);
        assert!((ph.amplitude - c.state().i_cmd).abs() < 0.01 * ph.amplitude);
    }

    #[test]
    fn voltage_controller_idle_holds_bias() {
        let mut c = VoltageController::new(2, nominal(), &gains(), 0.0, 0.0, 200.0, DT).unwrap();
        for k in 0..10000 {
            let out = c.step(VoltageMeasurements { i_g: 0.0 }, DT).unwrap();
            let s = c.state();
            assert!((s.v - 311.0 / 3.0).abs() < 1e-9, "step {k}");
            assert!((s.omega - W).abs() < 1e-9);
            assert!((out - s.v * s.theta.sin()).abs() < 1e-12);
        }
        assert!((c.state().v - 103.67).abs() < 0.005);
    }

    #[test]
    fn voltage_controller_fixed_point_at_steady_state() {
        let sol = solve_steady(&SteadyInputs {
            p_ref: vec![1500.0, 1300.0, 1100.0],
            phi_ref: 0.0,
            v_grid: 311.0,
            omega: W,
            l_line: 0.0,
            r_line: 0.0,
        })
        .unwrap();
        let expect = 2.0 * 1300.0 / sol.i_g;
        assert!((expect - 103.7).abs() < 0.05);
        let mut c = VoltageController::new(2, nominal(), &gains(), 1300.0, 0.0, 200.0, DT).unwrap();
        c.preload(sol.v[1], 0.0, sol.current());
        for k in 0..10000 {
            let t = k as f64 * DT;
            c.step(VoltageMeasurements { i_g: sol.current().sample(t, W) }, DT).unwrap();
            let s = c.state();
            assert!((s.v - expect).abs() < 0.005 * expect, "step {k}: {}", s.v);
            assert!(s.phi.abs() < 1e-3);
        }
    }

    fn run_voltage(
        c: &mut VoltageController,
        current: Phasor,
        steps: usize,
        mut each: impl FnMut(usize, &VoltageControllerState),
    ) {
        for k in 0..steps {
            let t = k as f64 * DT;
            c.step(VoltageMeasurements { i_g: current.sample(t, W) }, DT).unwrap();
            each(k, &c.state());
        }
    }

    #[test]
    fn leading_phase_slows_frequency() {
        let mut c = VoltageController::new(2, nominal(), &gains(), 0.0, 0.0, 200.0, DT).unwrap();
        c.set_theta(0.2);
        let mut first = None;
        run_voltage(&mut c, Phasor::new(25.0, 0.0), 400, |_, s| {
            if s.ready && first.is_none() {
                first = Some(*s);
            }
        });
        let s = first.unwrap();
        assert!((s.phi - 0.2).abs() < 1e-9, "{}", s.phi);
        assert!(s.omega < W);
    }

    #[test]
    fn phase_definition_is_exact() {
        let mut c = VoltageController::new(2, nominal(), &gains(), 1000.0, 0.1, 200.0, DT).unwrap();
        c.set_theta(0.7);
        let current = Phasor::new(18.0, -0.4);
        run_voltage(&mut c, current, 5000, |k, s| {
            if s.ready {
                let t = k as f64 * DT;
                assert!((s.phi - wrap_angle(s.theta - s.theta_ig)).abs() < 1e-12);
                assert!((s.theta_ig - wrap_angle(W * t + s.current.phase)).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn opposite_offsets_converge_to_reference() {
        let current = Phasor::new(25.0, 0.3);
        let mut pair: Vec<VoltageController> = (0..2)
            .map(|k| VoltageController::new(k + 2, nominal(), &gains(), 1300.0, 0.0, 200.0, DT).unwrap())
            .collect();
        pair[0].set_theta(0.3 + 0.3);
        pair[1].set_theta(0.3 - 0.3);
        for c in pair.iter_mut() {
            let mut checked = false;
            let sign = if c.theta() > 0.3 { 1.0 } else { -1.0 };
            run_voltage(c, current, 10000, |_, s| {
                if s.ready && !checked {
                    checked = true;
                    assert_eq!((s.omega - W).signum(), -sign);
                    assert_eq!(s.phi.signum(), sign);
                }
            });
            assert!(c.state().phi.abs() < 0.01, "{}", c.state().phi);
        }
    }

    #[test]
    fn outputs_respect_limits() {
        let mut c = VoltageController::new(2, nominal(), &gains(), 1.0e6, 0.0, 200.0, DT).unwrap();
        c.set_theta(3.0);
        run_voltage(&mut c, Phasor::new(1.0, 0.0), 20000, |_, s| {
            assert!((0.0..=200.0).contains(&s.v));
            assert!(s.omega >= 0.9 * W - 1e-9 && s.omega <= 1.1 * W + 1e-9);
        });
        let mut c = CurrentController::new(nominal(), &gains(), 1.0e6, 0.0, 60.0, 0.5e-3, DT).unwrap();
        for k in 0..20000 {
            let t = k as f64 * DT;
            let m = CurrentMeasurements { u_pcc: 311.0 * (W * t).sin(), i_g: (W * t).sin(), u_1: (W * t).sin() };
            c.step(m, DT).unwrap();
            assert!((0.0..=60.0).contains(&c.state().i_cmd));
        }
    }

    #[test]
    fn controllers_see_only_local_signals() {
        use std::any::TypeId;
        use std::mem::size_of;
        fn inputs_of<C: LocalController>() -> TypeId
        where
            C::Inputs: 'static,
        {
            TypeId::of::<C::Inputs>()
        }
        assert_eq!(inputs_of::<VoltageController>(), TypeId::of::<VoltageMeasurements>());
        assert_eq!(inputs_of::<CurrentController>(), TypeId::of::<CurrentMeasurements>());
        // one sample of i_g; three samples (u_pcc, i_g, u_1)
        assert_eq!(size_of::<VoltageMeasurements>(), size_of::<f64>());
        assert_eq!(size_of::<CurrentMeasurements>(), 3 * size_of::<f64>());
        let VoltageMeasurements { i_g: _ } = VoltageMeasurements { i_g: 0.0 };
        let CurrentMeasurements { u_pcc: _, i_g: _, u_1: _ } = CurrentMeasurements { u_pcc: 0.0, i_g: 0.0, u_1: 0.0 };
    }

    #[test]
    fn rejects_non_finite_measurements() {
        let mut v = VoltageController::new(2, nominal(), &gains(), 0.0, 0.0, 200.0, DT).unwrap();
        assert!(v.step(VoltageMeasurements { i_g: f64::NAN }, DT).is_err());
        assert!(v.step(VoltageMeasurements { i_g: 0.0 }, 0.0).is_err());
        let mut c = CurrentController::new(nominal(), &gains(), 0.0, 0.0, 60.0, 0.5e-3, DT).unwrap();
        assert!(c.step(CurrentMeasurements { u_pcc: f64::INFINITY, i_g: 0.0, u_1: 0.0 }, DT).is_err());
    }
}
