//! Trace CSV and summary JSON writers.

use std::io::{self, Write};
use std::path::Path;

use cascade_core::sim::{Trace, TraceRecord};
use tempfile::NamedTempFile;

/// Formats `x` with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // drop trailing zeros after the point
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

/// Column names with unit suffixes, in file order.
pub fn csv_header(n: usize) -> Vec<String> {
    let mut cols: Vec<String> =
        ["t_s", "i_g_A", "u_pcc_V", "I_g_A", "theta_Ig_rad", "V_pcc_V", "theta_pcc_rad", "I_cmd_A", "theta_p_rad"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    for k in 1..=n {
        for (name, unit) in
            [("u", "V"), ("V", "V"), ("theta", "rad"), ("omega", "rad_s"), ("P", "W"), ("Q", "var"), ("phi", "rad")]
        {
            cols.push(format!("{name}_{k}_{unit}"));
        }
    }
    cols
}

fn csv_row(r: &TraceRecord) -> Vec<String> {
    let mut fields = vec![r.t, r.i_g, r.u_pcc, r.i_amp, r.theta_ig, r.v_pcc, r.theta_pcc, r.i_cmd, r.theta_p];
    for v in &r.inverters {
        fields.extend([v.u, v.v, v.theta, v.omega, v.p, v.q, v.phi]);
    }
    fields.into_iter().map(sig9).collect()
}

pub fn trace_csv(trace: &Trace) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(trace.n)).expect("in-memory write");
    for r in &trace.records {
        w.write_record(csv_row(r)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
