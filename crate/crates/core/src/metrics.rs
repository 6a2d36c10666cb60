//! Steady-state window statistics and settling times of a finished trace.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::config::{Config, Event};
use crate::error::{Error, Result};
use crate::signal::wrap_angle;
use crate::sim::{RunViolation, Trace, TraceRecord};

/// Relative band used for settling times.
pub const SETTLING_BAND: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: f64,
    pub end: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean PF angle of each inverter against the grid current.
    pub phi: Vec<f64>,
    pub i_amp: f64,
    pub p_pcc: f64,
    pub q_pcc: f64,
    pub pf_pcc: f64,
    /// `V_k / V_1`.
    pub v_ratio: Vec<f64>,
    /// `P_k / P_1`.
    pub p_ratio: Vec<f64>,
    /// Largest `|phi_k - phi_ref|` over the window and over inverters 2..n.
    pub max_phi_error: f64,
    /// Largest `|phi_k|` over the window and over all inverters.
    pub max_phase_to_current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settling {
    pub t: f64,
    pub events: Vec<Event>,
    /// Time after the event until every `P_k` stays within the band.
    pub power: f64,
    /// Time after the event until every `V_k` stays within the band.
    pub voltage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// One window before each event time and one at the end of the run.
    pub windows: Vec<WindowStats>,
    pub settling: Vec<Settling>,
    pub violations: Vec<RunViolation>,
    pub max_kvl_residual: f64,
}

impl Summary {
    pub fn final_window(&self) -> &WindowStats {
        self.windows.last().expect("summary has a final window")
    }
}

fn window_stats(records: &[TraceRecord], phi_ref: f64) -> WindowStats {
    let n = records[0].inverters.len();
    let count = records.len() as f64;
    let mean = |f: &dyn Fn(&TraceRecord) -> f64| records.iter().map(f).sum::<f64>() / count;
    let per = |f: &dyn Fn(&crate::sim::InverterRecord) -> f64| -> Vec<f64> {
        (0..n).map(|k| mean(&|r: &TraceRecord| f(&r.inverters[k]))).collect()
    };
    let p = per(&|x| x.p);
    let v = per(&|x| x.v);
    let (p_pcc, q_pcc) = {
        let pq: Vec<(f64, f64)> = records.iter().map(TraceRecord::pcc_pq).collect();
        (pq.iter().map(|x| x.0).sum::<f64>() / count, pq.iter().map(|x| x.1).sum::<f64>() / count)
    };
    let mut max_phi_error: f64 = 0.0;
    let mut max_phase_to_current: f64 = 0.0;
    for r in records {
        for (k, inv) in r.inverters.iter().enumerate() {
            max_phase_to_current = max_phase_to_current.max(inv.phi.abs());
            if k > 0 {
                max_phi_error = max_phi_error.max(wrap_angle(inv.phi - phi_ref).abs());
            }
        }
    }
    WindowStats {
        start: records[0].t,
        end: records[records.len() - 1].t,
        v_ratio: v.iter().map(|x| x / v[0]).collect(),
        p_ratio: p.iter().map(|x| x / p[0]).collect(),
        q: per(&|x| x.q),
        phi: per(&|x| x.phi),
        i_amp: mean(&|r| r.i_amp),
        pf_pcc: p_pcc / p_pcc.hypot(q_pcc),
        p,
        v,
        p_pcc,
        q_pcc,
        max_phi_error,
        max_phase_to_current,
    }
}

/// Last time in `records` at which any channel lies outside the band around
/// `target`, measured from `t0`; zero if all records are inside.
fn settling_time(
    records: &[TraceRecord],
    t0: f64,
    target: &[f64],
    channel: impl Fn(&TraceRecord, usize) -> f64,
) -> f64 {
    let outside =
        |r: &TraceRecord| target.iter().enumerate().any(|(k, m)| (channel(r, k) - m).abs() > SETTLING_BAND * m.abs());
    match records.iter().rposition(outside) {
        None => 0.0,
        Some(i) if i + 1 < records.len() => records[i + 1].t - t0,
        Some(i) => records[i].t - t0,
    }
}

pub fn metrics(trace: &Trace, cfg: &Config) -> Result<Summary> {
    let period = TAU / cfg.nominal.omega;
    let rdt = trace.record_dt();
    let window_len = cfg.output.window_periods as f64 * period;
    let records = &trace.records;
    if records.is_empty() {
        return Err(Error::WindowTooShortForMetrics { periods: 0.0 });
    }
    let end = records[records.len() - 1].t;

    // event groups in firing order
    let mut groups: Vec<(f64, Vec<Event>)> = Vec::new();
    for e in &trace.events {
        match groups.last_mut() {
            Some((t, evs)) if (*t - e.t).abs() < 0.5 * trace.dt => evs.push(e.event),
            _ => groups.push((e.t, vec![e.event])),
        }
    }
    let mut boundaries: Vec<f64> = groups.iter().map(|g| g.0).filter(|&t| t > 0.0).collect();
    boundaries.push(end + rdt);

    let mut windows = Vec::with_capacity(boundaries.len());
    let mut seg_start = 0.0;
    for &b in &boundaries {
        let available = b - seg_start;
        let len = window_len.min(available);
        let periods = (len / period + 1e-9).floor();
        if periods < 2.0 {
            return Err(Error::WindowTooShortForMetrics { periods: len / period });
        }
        let count = ((periods * period) / rdt).round() as usize;
        let stop = records.partition_point(|r| r.t < b - 0.5 * rdt);
        let begin = stop.saturating_sub(count);
        windows.push(window_stats(&records[begin..stop], cfg.scenario.phi_ref));
        seg_start = b;
    }

    let mut settling = Vec::new();
    for (t0, evs) in groups {
        let Some(seg) = boundaries.iter().position(|&b| b > t0 + 0.5 * rdt) else { continue };
        let seg_end = boundaries[seg];
        let lo = records.partition_point(|r| r.t < t0 - 0.5 * rdt);
        let hi = records.partition_point(|r| r.t < seg_end - 0.5 * rdt);
        let w = &windows[seg];
        settling.push(Settling {
            t: t0,
            events: evs,
            power: settling_time(&records[lo..hi], t0, &w.p, |r, k| r.inverters[k].p),
            voltage: settling_time(&records[lo..hi], t0, &w.v, |r, k| r.inverters[k].v),
        });
    }

    Ok(Summary { windows, settling, violations: trace.violations.clone(), max_kvl_residual: trace.max_kvl_residual })
}
