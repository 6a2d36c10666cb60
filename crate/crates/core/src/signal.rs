//! Numerical primitives shared by the plant and the controllers: angle
//! arithmetic, a clamped PI block and a one-period fundamental estimator.
//!
//! Phases throughout the crate are referenced to `sin(omega * t)`: a phasor
//! `(a, psi)` stands for the waveform `a * sin(omega * t + psi)`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
///
/// Non-finite input yields `NaN`, which the simulator treats as a fault.
pub fn wrap_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return f64::NAN;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Fundamental-frequency sinusoid: peak amplitude and phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Phasor {
    pub amplitude: f64,
    pub phase: f64,
}

impl Phasor {
    /// Builds a phasor, folding a negative amplitude into a half-turn of phase.
    pub fn new(amplitude: f64, phase: f64) -> Self {
        if amplitude < 0.0 {
            Phasor { amplitude: -amplitude, phase: wrap_angle(phase + PI) }
        } else {
            Phasor { amplitude, phase: wrap_angle(phase) }
        }
    }

    pub fn from_complex(c: Complex64) -> Self {
        Phasor::new(c.norm(), c.arg())
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase)
    }

    /// Instantaneous value of the waveform at time `t`.
    pub fn sample(self, t: f64, omega: f64) -> f64 {
        self.amplitude * (omega * t + self.phase).sin()
    }
}

/// Discrete PI controller with output clamping and integral-clamping anti-windup.
///
/// The integral is kept in output units so that retuning `ki` does not bump the
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct PiBlock {
    pub kp: f64,
    pub ki: f64,
    pub integral: f64,
    pub out_min: f64,
    pub out_max: f64,
    pub bias: f64,
}

impl PiBlock {
    pub fn new(kp: f64, ki: f64, out_min: f64, out_max: f64) -> Self {
        PiBlock { kp, ki, integral: 0.0, out_min, out_max, bias: 0.0 }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    /// Output the block would produce for `error` with the current integral.
    pub fn output_for(&self, error: f64) -> f64 {
        (self.bias + self.kp * error + self.integral).clamp(self.out_min, self.out_max)
    }

    /// Output held when no error is applied.
    pub fn held_output(&self) -> f64 {
        self.output_for(0.0)
    }

    /// Advances the integral by one forward-Euler step and returns the clamped output.
    pub fn step(&mut self, error: f64, dt: f64) -> Result<f64> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        if !error.is_finite() {
            return Err(Error::NonFinite("PI error"));
        }
        let candidate = self.integral + self.ki * error * dt;
        let raw = self.bias + self.kp * error + candidate;
        // integral may advance up to the saturation boundary, never past it
        self.integral = if raw > self.out_max && error > 0.0 {
            self.integral.max(self.out_max - self.bias - self.kp * error)
        } else if raw < self.out_min && error < 0.0 {
            self.integral.min(self.out_min - self.bias - self.kp * error)
        } else {
            candidate
        };
        Ok(self.output_for(error))
    }
}

/// Result of pushing a sample into a [`FundamentalEstimator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    /// Fewer than one full window seen; the phasor is a partial-window guess.
    WarmingUp(Phasor),
    Ready(Phasor),
}

impl Estimate {
    pub fn phasor(self) -> Phasor {
        match self {
            Estimate::WarmingUp(p) | Estimate::Ready(p) => p,
        }
    }

    pub fn is_ready(self) -> bool {
        matches!(self, Estimate::Ready(_))
    }
}

/// Sliding single-bin DFT over exactly one nominal fundamental period.
///
/// Integer harmonics of the nominal frequency are nulled by the window.
#[derive(Debug, Clone)]
pub struct FundamentalEstimator {
    omega: f64,
    dt: f64,
    window: usize,
    // (x*sin, x*cos) products of the samples currently in the window
    ring: Vec<(f64, f64)>,
    head: usize,
    seen: usize,
    sum_sin: f64,
    sum_cos: f64,
    last: Estimate,
}

impl FundamentalEstimator {
    pub const MIN_WINDOW: usize = 16;

    pub fn new(omega: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::NonPositiveStep(dt));
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::invalid("omega", "nominal angular frequency must be positive"));
        }
        let window = (TAU / (omega * dt)).round() as usize;
        if window < Self::MIN_WINDOW {
            return Err(Error::WindowTooShort(window));
        }
        Ok(FundamentalEstimator {
            omega,
            dt,
            window,
            ring: vec![(0.0, 0.0); window],
            head: 0,
            seen: 0,
            sum_sin: 0.0,
            sum_cos: 0.0,
            last: Estimate::WarmingUp(Phasor::default()),
        })
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> Estimate {
        self.last
    }

    pub fn push(&mut self, sample: f64, t: f64) -> Estimate {
        let (s, c) = (self.omega * t).sin_cos();
        let product = (sample * s, sample * c);
        let old = std::mem::replace(&mut self.ring[self.head], product);
        self.head += 1;
        self.seen += 1;
        if self.head == self.window {
            self.head = 0;
            // re-sum once per window so rounding cannot accumulate
            self.sum_sin = self.ring.iter().map(|p| p.0).sum();
            self.sum_cos = self.ring.iter().map(|p| p.1).sum();
        } else {
            self.sum_sin += product.0 - old.0;
            self.sum_cos += product.1 - old.1;
        }

        let count = self.seen.min(self.window);
        let scale = 2.0 / count as f64;
        // a sin(wt + psi) correlates to (a cos psi, a sin psi)
        let phasor = Phasor::from_complex(Complex64::new(self.sum_sin * scale, self.sum_cos * scale));
        self.last = if self.seen >= self.window { Estimate::Ready(phasor) } else { Estimate::WarmingUp(phasor) };
        self.last
    }
}
