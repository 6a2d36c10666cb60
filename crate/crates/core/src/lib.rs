//! Simulation and steady-state analysis of grid-connected cascaded inverters
//! under decentralized control with unequal power capacities.
//!
//! Inverter-1 regulates the common grid current from the PCC voltage phase;
//! inverters 2..n vary their voltage amplitude with their available power and
//! synchronize their phase by holding a common power-factor angle against the
//! shared current.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod config;
pub mod control;
pub mod error;
pub mod metrics;
pub mod plant;
pub mod signal;
pub mod sim;
pub mod steady;
pub mod verify;

pub use config::Config;
pub use error::{Error, Result};
