//! `esdlab`: runs manifests against the esd-core model and writes CSV, JSON and SVG.

mod commands;
mod manifest;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Globals;

#[derive(Parser)]
#[command(
    name = "esdlab",
    version,
    about = "Entanglement sudden-death laboratory"
)]
struct Cli {
    /// JSON manifest for the command.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory; overrides the manifest `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides the manifest `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid size; overrides the manifest grid.
    #[arg(long, global = true)]
    grid_points: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Both NOT arms over the second-damping grid, with classification.
    Sweep,
    /// Concurrence and purity after the first channel.
    CharacterizeFirst,
    /// Concurrence and purity after the product damping channel.
    CharacterizeSecond,
    /// Classification over a grid of first-channel strengths.
    Regimes,
    /// Optics-derived Kraus sets against the closed forms.
    VerifyOracle,
    /// Concurrence drop under a component error budget.
    ErrorReport,
    /// Simulated tomography and reconstruction.
    TomoSim,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = Globals {
        manifest: cli.manifest,
        out: cli.out,
        seed: cli.seed,
        grid_points: cli.grid_points,
    };
    let result = match cli.command {
        Command::Sweep => commands::sweep(&g),
        Command::CharacterizeFirst => commands::characterize_first(&g),
        Command::CharacterizeSecond => commands::characterize_second(&g),
        Command::Regimes => commands::regimes(&g),
        Command::VerifyOracle => commands::verify(&g),
        Command::ErrorReport => commands::error_report_cmd(&g),
        Command::TomoSim => commands::tomo_sim(&g),
    };
    match result {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("tolerance check failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
