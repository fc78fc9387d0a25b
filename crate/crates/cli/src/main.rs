#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::run::{CliError, Command};

#[derive(Debug, Parser)]
#[command(
    name = "bkthermo",
    version,
    about = "Thermodynamic formalism workbench for meromorphic maps"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set potential.t=3.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output.directory` and `BKTHERMO_OUT`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Backward-orbit sample of the Julia set.
    SampleJulia,
    /// Topological pressure at the configured (τ, t).
    Pressure,
    /// Pressure over a grid of t.
    PressureCurve,
    /// Fixed point of the normalized operator on the cloud.
    Density,
    /// Conformal measure by both constructions.
    Conformal,
    /// Gibbs state from prior `conformal` and `density` outputs.
    Gibbs {
        /// Directory holding the inputs (default: the output directory).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Numerical checks of the supporting estimates.
    Verify,
    /// Zero of t ↦ P(t) (experimental).
    Dimension,
    /// Rerun from a manifest and compare output hashes.
    Replay { manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Replay { manifest } => run::replay(&manifest, cli.out.as_deref()),
        cmd => {
            let command = match cmd {
                Cmd::SampleJulia => Command::SampleJulia,
                Cmd::Pressure => Command::Pressure,
                Cmd::PressureCurve => Command::PressureCurve,
                Cmd::Density => Command::Density,
                Cmd::Conformal => Command::Conformal,
                Cmd::Gibbs { from } => Command::Gibbs { from },
                Cmd::Verify => Command::Verify,
                Cmd::Dimension => Command::Dimension,
                Cmd::Replay { .. } => unreachable!(),
            };
            RunConfig::load(cli.config.as_deref(), &cli.overrides)
                .map_err(|e| (CliError::Config(e), None))
                .and_then(|cfg| run::execute(&command, &cfg, cli.out.as_deref(), cli.threads))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, dir)) => {
            let code = err.exit_code();
            run::report_error(&err, dir.as_deref());
            ExitCode::from(code)
        }
    }
}
