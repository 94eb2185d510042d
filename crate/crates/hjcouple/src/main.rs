use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hjcouple::cli::{self, Overrides};

/// Thread-count override for the internal worker pool.
const THREADS_ENV: &str = "HJCOUPLE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "hjcouple", version, about = "Verify coupling hypotheses, solve resolvents and trace the doubling construction")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Override the document seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated α-schedule for `trace`.
    #[arg(long, global = true)]
    schedule: Option<String>,
    /// Directory for reports and tables.
    #[arg(long, global = true, default_value = "hjcouple-out")]
    out_dir: PathBuf,
    /// Multiply every check tolerance.
    #[arg(long, global = true)]
    tolerance_scale: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the hypothesis checks declared in a document.
    Check { doc: PathBuf },
    /// Solve the resolvent section and verify contraction and the strict estimate.
    Solve { doc: PathBuf },
    /// Run the doubling trace along the α-schedule.
    Trace { doc: PathBuf },
    /// Combine saved reports.
    Report {
        #[arg(long, required = true)]
        merge: bool,
        reports: Vec<PathBuf>,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("{THREADS_ENV}={raw} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(args: Args) -> hjcouple::Result<i32> {
    let ov = Overrides {
        seed: args.seed,
        schedule: args.schedule.as_deref().map(cli::parse_schedule).transpose()?,
        out_dir: Some(args.out_dir.clone()),
        tolerance_scale: args.tolerance_scale,
    };
    if let Some(s) = ov.tolerance_scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(hjcouple::Error::invalid("--tolerance-scale must be finite and > 0"));
        }
    }
    let dir = &args.out_dir;
    let (name, value, code) = match &args.command {
        Command::Check { doc } => {
            let o = cli::cmd_check(&cli::load_document(doc)?, &ov)?;
            ("check", o.report.to_json(), o.code)
        }
        Command::Solve { doc } => {
            let o = cli::cmd_solve(&cli::load_document(doc)?, &ov, dir)?;
            ("solve", o.report.to_json(), o.code)
        }
        Command::Trace { doc } => {
            let o = cli::cmd_trace(&cli::load_document(doc)?, &ov, dir)?;
            ("trace", o.report.to_json(), o.code)
        }
        Command::Report { reports, .. } => {
            let (v, code) = cli::merge_reports(reports)?;
            ("merged", v, code)
        }
    };
    let path = cli::write_report(dir, name, &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    let verdict = if code == 0 { "PASS" } else { "FAIL" };
    let first = value.get("first_failure").and_then(|v| v.as_str()).map(|s| format!(" (first failure: {s})")).unwrap_or_default();
    eprintln!("{verdict}{first}; report written to {}", path.display());
    Ok(code)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    match panic::catch_unwind(|| run(args)) {
        Ok(Ok(code)) => ExitCode::from(code as u8),
        Ok(Err(e)) => {
            let json = serde_json::json!({"error": e.to_string(), "input_error": e.is_input_error()});
            println!("{json}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
        Err(_) => ExitCode::from(2),
    }
}
