mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use odeslab::harness::{emit_report, run_plan};
use odeslab::verify::{determinism_plan, run_suite, select, CRITERIA};
use odeslab::Error;

use config::RunConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "odeslab", version, about = "Convergence experiments for diffusion ODE samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides ODESLAB_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 picks the machine default.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Plot a report CSV as a log-log SVG.
    Plot { csv: PathBuf, svg: PathBuf },
    /// Run the built-in acceptance suite.
    Verify {
        /// Only criteria whose name starts with this prefix.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Also write the determinism report here (ODESLAB_OUT if unset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

fn root_cause(e: &Error) -> &Error {
    match e {
        Error::AtStep { source, .. } => root_cause(source),
        other => other,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match root_cause(&e) {
            Error::InvalidPlan(_)
            | Error::InvalidSampler(_)
            | Error::InvalidGrid(_)
            | Error::GridViolation { .. }
            | Error::InvalidSchedule(_)
            | Error::InvalidModel(_)
            | Error::OutsideDomain { .. }
            | Error::InfiniteLambda { .. }
            | Error::LambdaOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::Io(_) => EXIT_CONFIG,
            _ => EXIT_NUMERICAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os("ODESLAB_OUT").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn cmd_run(path: &Path, out: Option<PathBuf>, threads: Option<usize>) -> Result<(), Failure> {
    let cfg = load_config(path)?;
    let plan = cfg.plan();
    plan.validate()?;
    let dir = out.or_else(env_out).or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let threads = threads.or(cfg.threads).unwrap_or(0);
    let start = Instant::now();
    let report = run_plan(&plan, threads)?;
    let stem = plan.display_name();
    let (csv, json) = emit_report(&report, &dir, &stem)?;
    for f in &report.fits {
        let slope = f.slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "n/a".into());
        println!("{:<28} slope {slope}", f.group);
    }
    println!("wrote {} and {}", csv.display(), json.display());
    eprintln!("runtime {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_plot(csv: &Path, svg: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(csv).map_err(|e| Failure::config(format!("{}: {e}", csv.display())))?;
    let out = plot::render_svg(&bytes).map_err(|e| Failure::config(format!("{}: {e}", csv.display())))?;
    std::fs::write(svg, out).map_err(|e| Failure::config(format!("{}: {e}", svg.display())))?;
    Ok(())
}

fn cmd_verify(only: Option<&str>, threads: usize, out: Option<PathBuf>) -> Result<bool, Failure> {
    if select(only).is_empty() {
        return Err(Failure::config(format!(
            "no criterion matches {:?}; known: {}",
            only.unwrap_or_default(),
            CRITERIA.join(", ")
        )));
    }
    let start = Instant::now();
    let outcomes = run_suite(only, threads);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    if let Some(dir) = out.or_else(env_out) {
        let plan = determinism_plan();
        let report = run_plan(&plan, threads)?;
        emit_report(&report, &dir, &plan.display_name())?;
    }
    eprintln!("runtime {:.2} s", start.elapsed().as_secs_f64());
    Ok(passed == outcomes.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, threads } => cmd_run(&config, out, threads).map(|_| true),
        Command::Plot { csv, svg } => cmd_plot(&csv, &svg).map(|_| true),
        Command::Verify { only, threads, out } => cmd_verify(only.as_deref(), threads, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
