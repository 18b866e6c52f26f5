//! Command-line front end: configuration, orchestration, CSV and SVG output.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{ConfigError, Overrides, RunConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_FLAGGED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] diamag_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Core(diamag_core::Error::InvalidInput(_)) | CliError::Core(diamag_core::Error::EmptyWindow(_)) => EXIT_USAGE,
            CliError::Core(_) | CliError::Io(_) => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "diamag", version, about = "Hydrogen in a magnetic field: closed orbits, spectra, wavepacket recurrences and Bohmian trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML file of dotted keys; defaults give the desk-scale run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Ensemble seed (overrides ensemble.seed).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Write CSV files only.
    #[arg(long, global = true)]
    pub no_plots: bool,
    /// Spectrum cache directory (overrides cache.dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Find closed classical orbits at the configured scaled energy.
    ClosedOrbits,
    /// Solve for the eigenstates in the energy window (cached).
    Spectrum,
    /// Build the wavepacket and write autocorrelation, probe and recurrence-signal series.
    Evolve,
    /// Integrate Bohmian trajectories and test the ensemble against |psi|^2.
    Bohm,
    /// Every stage in order.
    All,
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let ov = Overrides { seed: cli.seed, out: cli.out.clone(), cache: cli.cache.clone() };
    Ok(RunConfig::from_toml_str(&text, &ov)?)
}

fn execute(cmd: Command, run: &mut Run) -> Result<(), CliError> {
    match cmd {
        Command::ClosedOrbits => {
            commands::closed_orbits(run)?;
        }
        Command::Spectrum => {
            commands::spectrum(run)?;
        }
        Command::Evolve => {
            let spectrum = commands::cached_spectrum(run.cfg)?;
            let orbits = commands::find_orbits(run)?;
            commands::evolve(run, &spectrum, &orbits.orbits)?;
        }
        Command::Bohm => {
            let spectrum = commands::cached_spectrum(run.cfg)?;
            let orbits = commands::find_orbits(run)?;
            let ev = commands::evolve(run, &spectrum, &orbits.orbits)?;
            commands::bohm(run, &ev)?;
        }
        Command::All => {
            let orbits = commands::closed_orbits(run)?;
            let spectrum = commands::spectrum(run)?;
            let ev = commands::evolve(run, &spectrum, &orbits.orbits)?;
            commands::bohm(run, &ev)?;
        }
    }
    Ok(())
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let mut run = match Run::new(&cfg, !cli.no_plots) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let outcome = execute(cli.command, &mut run);
    let flagged: Vec<String> = commands::violations(&run.flags)
        .iter()
        .map(|f| format!("{} (value {}, threshold {})", f.name, f.value, f.threshold))
        .collect();
    let status = match (&outcome, flagged.is_empty()) {
        (Err(_), _) => "failed",
        (Ok(()), true) => "ok",
        (Ok(()), false) => "flagged",
    };
    if let Err(e) = run.manifest.write(status) {
        eprintln!("error: writing the manifest: {e}");
        return ExitCode::from(EXIT_NUMERICAL);
    }
    match outcome {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Ok(()) if !flagged.is_empty() => {
            for f in &flagged {
                eprintln!("flagged: {f}");
            }
            ExitCode::from(EXIT_FLAGGED)
        }
        Ok(()) => ExitCode::SUCCESS,
    }
}
