// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{Format, RunConfig, TEMPLATE};

/// Steady subsonic Euler-Poisson nozzle flows.
#[derive(Parser)]
#[command(name = "epnozzle", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Field file format (overrides output.format).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Random seed (overrides iteration.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the documented default configuration and exit.
    #[arg(long)]
    emit_template: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// One-dimensional background: profiles, boundary triple, margins.
    Background,
    /// Nonlinear fixed point for the configured perturbation.
    Solve,
    /// Fixed points over sweep.sigmas and the fitted scalings.
    Sweep,
    /// Fixed point in the deformed nozzle described by [domain].
    PerturbDomain,
    /// Invariant battery with one pass/fail line per invariant.
    Verify,
}

/// Exit-code contract: 2 sonic or vacuum breakdown, 3 non-contraction,
/// 4 admissibility exit, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use epnozzle::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(
            E::SonicBreakdown { .. }
            | E::VacuumBreakdown { .. }
            | E::SonicProximity { .. }
            | E::Vacuum { .. }
            | E::NotSubsonic(_),
        ) => 2,
        Some(E::NonContraction { .. }) => 3,
        Some(E::AdmissibilityExit(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<i32> {
    if cli.emit_template {
        print!("{TEMPLATE}");
        return Ok(0);
    }
    let Some(command) = cli.command else {
        anyhow::bail!("no subcommand given (try --help)");
    };
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.iteration.seed = seed;
    }
    if let Some(format) = cli.format {
        config.output.format = format;
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.to_string_lossy().into_owned();
    }
    let out = PathBuf::from(&config.output.dir);
    commands::prepare_out(&out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    let ctx = commands::Run { config: &config, out, format: config.output.format };
    match command {
        Command::Background => commands::background_cmd(&ctx),
        Command::Solve => commands::solve_cmd(&ctx),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::PerturbDomain => commands::perturb_domain_cmd(&ctx),
        Command::Verify => commands::verify_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epnozzle::Error;

    #[test]
    fn exit_codes_follow_error_class() {
        let code = |e: Error| exit_code(&anyhow::Error::new(e).context("run"));
        assert_eq!(code(Error::SonicBreakdown { x: 0.5 }), 2);
        assert_eq!(code(Error::VacuumBreakdown { x: 0.5 }), 2);
        assert_eq!(code(Error::NonContraction { ratios: vec![1.0; 3] }), 3);
        assert_eq!(code(Error::AdmissibilityExit("ball".into())), 4);
        assert_eq!(code(Error::Domain("bad".into())), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 1);
    }
}
