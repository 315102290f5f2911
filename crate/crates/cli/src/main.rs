//! `qkdnet validate <scenario>` and `qkdnet run <scenario>`.
//!
//! Exit codes: 0 success, 2 invalid scenario, 3 invariant violation, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qkdnet_sim::metrics::write_csv;
use qkdnet_sim::scenario::ScenarioError;
use qkdnet_sim::{RunError, RunOptions, Scenario};

const EXIT_OTHER: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "Simulate QKD key relay networks")]
struct Cli {
    /// error, warn, info, debug or trace; RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every problem with its JSON pointer.
    Validate { scenario: PathBuf },
    /// Run a scenario and write metrics.csv and summary.json.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario duration, in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, env = "QKDNET_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Also write events.log.
        #[arg(long)]
        events: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_default_env()
        .init();
    let code = match cli.command {
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Run {
            scenario,
            seed,
            duration,
            out,
            events,
        } => cmd_run(
            &scenario,
            &RunOptions {
                seed,
                duration_s: duration,
                record_events: events,
            },
            &out,
        ),
    };
    ExitCode::from(code)
}

fn cmd_validate(path: &Path) -> u8 {
    match Scenario::load(path) {
        Ok(s) => {
            println!(
                "ok: {} ({} sites, {} links)",
                s.name,
                s.sites.len(),
                s.quantum_links.len()
            );
            0
        }
        Err(e) => report_scenario_error(&e),
    }
}

fn report_scenario_error(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Io(m) => {
            eprintln!("error: {m}");
            EXIT_OTHER
        }
        ScenarioError::Invalid(problems) => {
            for p in problems {
                eprintln!("invalid: {p}");
            }
            EXIT_INVALID
        }
    }
}

fn cmd_run(path: &Path, options: &RunOptions, out: &Path) -> u8 {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => return report_scenario_error(&e),
    };
    log::info!("running {} into {}", scenario.name, out.display());
    let output = match qkdnet_sim::run(&scenario, options) {
        Ok(o) => o,
        Err(RunError::Scenario(e)) => return report_scenario_error(&e),
        Err(e @ RunError::InvariantViolation { .. }) => {
            eprintln!("error: {e}");
            return EXIT_INVARIANT;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_OTHER;
        }
    };
    let written = (|| -> Result<(), Box<dyn std::error::Error>> {
        fs::create_dir_all(out)?;
        write_csv(&output.rows, fs::File::create(out.join("metrics.csv"))?)?;
        let mut summary = serde_json::to_string_pretty(&output.summary)?;
        summary.push('\n');
        fs::write(out.join("summary.json"), summary)?;
        if options.record_events {
            let mut f = std::io::BufWriter::new(fs::File::create(out.join("events.log"))?);
            for line in &output.events {
                writeln!(f, "{line}")?;
            }
            f.flush()?;
        }
        Ok(())
    })();
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", out.display());
        return EXIT_OTHER;
    }
    let s = &output.summary;
    println!(
        "{}: {} requests, satisfied ratio {:.4}, lambda {:.4}, {} race conflicts",
        s.scenario, s.requests, s.satisfied_ratio, s.lambda_final, s.race_conflicts
    );
    0
}
