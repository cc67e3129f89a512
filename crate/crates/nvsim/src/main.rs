//! Command-line entry point: loads configuration and protocol, runs a named
//! scenario on the chosen solver, writes traces/spectra/summaries, and lints
//! configuration files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nvsim::config::{validate_config_text, RunConfig};
use nvsim::engine::runner::Solver;
use nvsim::protocol::{builtin_protocols, parse_protocol, Protocol};
use nvsim::scenario::{run_scenario, Scenario, ScenarioOptions};

#[derive(Parser, Debug)]
#[command(
    name = "nvsim",
    about = "Charge-state and optical dynamics simulator for a single diamond colour centre",
    after_help = "Scenarios: fig1c (switching-rate power series), fig2a (conversion-gated \
neutral-line spectrum), fig2d (banded recovery scan), fig3 (repump stability comparison), \
custom (run --protocol as-is).\n\nWith --validate-config the file is linted and nothing runs."
)]
struct Cli {
    /// Scenario to run.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,

    /// Configuration file (defaults are used when absent).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Protocol for the custom scenario: a builtin name or a file path.
    #[arg(long)]
    protocol: Option<String>,

    /// RNG seed; required for every stochastic run.
    #[arg(long)]
    seed: Option<u64>,

    /// Solver backing the run.
    #[arg(long, default_value = "kmc", value_parser = parse_solver)]
    solver: Solver,

    /// Worker threads for independent trajectories.
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Output directory for traces, spectra and the summary.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Lint a configuration file and exit.
    #[arg(long, value_name = "PATH", conflicts_with = "scenario")]
    validate_config: Option<PathBuf>,
}

fn parse_scenario(text: &str) -> Result<Scenario, String> {
    Scenario::parse(text).ok_or_else(|| {
        format!("unknown scenario `{text}` (expected fig1c, fig2a, fig2d, fig3 or custom)")
    })
}

fn parse_solver(text: &str) -> Result<Solver, String> {
    Solver::parse(text).ok_or_else(|| format!("unknown solver `{text}` (expected kmc or ode)"))
}

fn load_protocol(spec: &str) -> Result<Protocol, String> {
    if let Some(p) = builtin_protocols().remove(spec) {
        return Ok(p);
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| format!("`{spec}` is not a builtin protocol and cannot be read: {e}"))?;
    parse_protocol(&text).map_err(|e| format!("{spec}: {e}"))
}

fn validate_config_command(path: &PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    };
    let diags = validate_config_text(&text);
    for d in &diags.errors {
        println!("error: {d}");
    }
    for d in &diags.warnings {
        println!("warning: {d}");
    }
    for note in &diags.calibration_notices {
        println!("note: {note}");
    }
    println!(
        "{} error(s), {} warning(s), {} calibration default(s)",
        diags.errors.len(),
        diags.warnings.len(),
        diags.calibration_notices.len()
    );
    if diags.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(path) = &cli.validate_config {
        return validate_config_command(path);
    }

    let Some(scenario) = cli.scenario else {
        eprintln!("error: --scenario (or --validate-config) is required");
        return ExitCode::FAILURE;
    };

    let config = match &cli.config {
        Some(path) => match nvsim::config::load_config(path) {
            Ok((config, diags)) => {
                for w in &diags.warnings {
                    eprintln!("warning: {w}");
                }
                config
            }
            Err(e) => {
                eprintln!("error: {e}");
                if let nvsim::config::ConfigError::Invalid(diags) = &e {
                    for d in &diags.errors {
                        eprintln!("error: {d}");
                    }
                }
                return ExitCode::FAILURE;
            }
        },
        None => RunConfig::default(),
    };

    let Some(seed) = cli.seed else {
        eprintln!("error: --seed is required for reproducible runs");
        return ExitCode::FAILURE;
    };

    let protocol = match &cli.protocol {
        Some(spec) => match load_protocol(spec) {
            Ok(p) => Some(p),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => None,
    };

    let options = ScenarioOptions {
        solver: cli.solver,
        workers: cli.workers.max(1),
        protocol,
        out_dir: cli.out.clone(),
    };

    match run_scenario(scenario, &config, seed, &options) {
        Ok(report) => {
            print!("{}", report.to_json());
            if let Some(dir) = &cli.out {
                eprintln!("outputs written to {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
