mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_core::metrics::{metrics, Summary};
use cascade_core::sim::{run, Trace};
use cascade_core::steady::{check_feasibility, solve_steady, Limits};
use cascade_core::verify::{verify, Tolerances, VerifyReport};
use cascade_core::{Config, Error};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_NAN: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cascade-sim",
    version,
    about = "Simulate grid-connected cascaded inverters under decentralized control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario; write the trace CSV and summary JSON.
    Run(Common),
    /// Print the analytic steady state for the final reference set.
    Steady(Common),
    /// Run a scenario and compare its final window with the steady state.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (JSON); omitted fields take the defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value by dotted path, e.g. scenario.duration=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for output files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// A failure carrying its process exit status.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NanAbort { step, channel } => {
                Failure(EXIT_NAN, format!("simulation aborted at step {step}: non-finite {channel}"))
            }
            other => Failure(EXIT_FAILURE, other.to_string()),
        }
    }
}

fn load(args: &Common) -> Result<Config, Failure> {
    let path = args.config.display();
    let text = fs::read_to_string(&args.config).map_err(|e| Failure(EXIT_BAD_CONFIG, format!("{path}: {e}")))?;
    Config::from_json_str(&text, &args.set).map_err(|e| Failure(EXIT_BAD_CONFIG, format!("{path}: {e}")))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()))
}

fn provenance(args: &Common, cfg: &Config) -> serde_json::Value {
    json!({
        "tool": "cascade-sim",
        "version": env!("CARGO_PKG_VERSION"),
        "config_file": args.config.display().to_string(),
        "overrides": args.set,
        "config": cfg,
    })
}

fn print_summary(name: &str, trace: &Trace, s: &Summary) {
    println!("{name}: {} steps, {} records", trace.steps, trace.records.len());
    for w in &s.windows {
        println!(
            "window [{:.3}, {:.3}] s  I_g {:.3} A  P_pcc {:.1} W  Q_pcc {:.1} var  PF_pcc {:.4}",
            w.start, w.end, w.i_amp, w.p_pcc, w.q_pcc, w.pf_pcc
        );
        println!("  {:>3} {:>10} {:>10} {:>9} {:>9} {:>7}", "inv", "P [W]", "Q [var]", "V [V]", "phi [rad]", "V/V1");
        for k in 0..w.p.len() {
            println!(
                "  {:>3} {:>10.1} {:>10.1} {:>9.3} {:>9.4} {:>7.4}",
                k + 1,
                w.p[k],
                w.q[k],
                w.v[k],
                w.phi[k],
                w.v_ratio[k]
            );
        }
    }
    for st in &s.settling {
        println!("settling after t={:.3} s: power {:.3} s, voltage {:.3} s", st.t, st.power, st.voltage);
    }
    if s.violations.is_empty() {
        println!("violations: none");
    } else {
        for v in &s.violations {
            println!("violation: {}", serde_json::to_string(v).unwrap_or_default());
        }
    }
    println!("max loop-equation residual: {:.3e} V", s.max_kvl_residual);
}

fn cmd_run(args: &Common) -> Result<(), Failure> {
    let cfg = load(args)?;
    let trace = run(&cfg)?;
    let stem = args.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    fs::create_dir_all(&args.out_dir).map_err(|e| io_failure(&args.out_dir, e))?;

    let csv_path = args.out_dir.join(format!("{stem}.trace.csv"));
    output::write_atomic(&csv_path, &output::trace_csv(&trace)).map_err(|e| io_failure(&csv_path, e))?;

    let summary = metrics(&trace, &cfg)?;
    let doc = json!({
        "provenance": provenance(args, &cfg),
        "steps": trace.steps,
        "record_dt": trace.record_dt(),
        "events": trace.events,
        "summary": summary,
        "steady": solve_steady(&cfg.final_steady_inputs()).ok(),
    });
    let json_path = args.out_dir.join(format!("{stem}.summary.json"));
    let text = serde_json::to_string_pretty(&doc).expect("summary serializes");
    output::write_atomic(&json_path, text.as_bytes()).map_err(|e| io_failure(&json_path, e))?;

    print_summary(&stem, &trace, &summary);
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_steady(args: &Common) -> Result<(), Failure> {
    let cfg = load(args)?;
    let sol = solve_steady(&cfg.final_steady_inputs())?;
    let violations = check_feasibility(&sol, Limits { v_max: cfg.plant.v_max, i_max: cfg.plant.i_max });
    let doc = json!({ "solution": sol, "feasible": violations.is_empty(), "violations": violations });
    println!("{}", serde_json::to_string_pretty(&doc).expect("solution serializes"));
    if violations.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(Failure(EXIT_FAILURE, format!("infeasible: {}", list.join("; "))))
    }
}

fn print_verify(report: &VerifyReport) {
    println!("{:<8} {:>14} {:>14} {:>10} {:>8}  status", "quantity", "simulated", "expected", "error", "tol");
    for c in &report.checks {
        println!(
            "{:<8} {:>14.6} {:>14.6} {:>10.3e} {:>8}  {}",
            c.quantity,
            c.simulated,
            c.expected,
            c.error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
}

fn cmd_verify(args: &Common) -> Result<(), Failure> {
    let cfg = load(args)?;
    let report = verify(&cfg, Tolerances::default())?;
    print_verify(&report);
    let worst = report.worst().expect("at least one check");
    if report.passed() {
        println!("verify passed; worst {} at {:.1}% of tolerance", worst.quantity, 100.0 * worst.severity());
        Ok(())
    } else {
        Err(Failure(
            EXIT_FAILURE,
            format!(
                "verify failed; worst offender {}: simulated {:.6}, expected {:.6}, error {:.3e} > tolerance {}",
                worst.quantity, worst.simulated, worst.expected, worst.error, worst.tolerance
            ),
        ))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Steady(a) => cmd_steady(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
