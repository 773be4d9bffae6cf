use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spme_cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "spme", version, about = "Stochastic porous media / fast diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One stochastic trajectory.
    Path(Common),
    /// Noise-free trajectory.
    Det(Common),
    /// Direct and rescaled solvers on one Brownian path, with their distance.
    Rescaled(Common),
    /// Monte Carlo ensemble with extinction statistics.
    Ensemble(Common),
    /// Coupled ladder study (and direct vs rescaled study).
    Converge(Common),
    /// Embedding constant of the domain.
    Gamma {
        #[command(flatten)]
        common: Common,
        /// Exponent m (defaults to the graph's coercivity exponent).
        #[arg(long)]
        m: Option<f64>,
    },
    /// Recompute the summary of a stored run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 if any check fails.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, env = "SPME_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Path index for single-path commands.
    #[arg(long, default_value_t = 0)]
    path_index: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, m, check) = match cli.command {
        Cmd::Path(c) => (Command::Path, c, None, false),
        Cmd::Det(c) => (Command::Det, c, None, false),
        Cmd::Rescaled(c) => (Command::Rescaled, c, None, false),
        Cmd::Ensemble(c) => (Command::Ensemble, c, None, false),
        Cmd::Converge(c) => (Command::Converge, c, None, false),
        Cmd::Gamma { common, m } => (Command::Gamma, common, m, false),
        Cmd::Report { common, check } => (Command::Report, common, None, check),
    };
    let opts = RunOptions {
        out: common.out,
        paths: common.paths,
        threads: common.threads,
        seed: common.seed,
        path_index: common.path_index,
        m,
        check,
    };
    match run(command, common.config.as_deref(), &opts) {
        Ok(summary) => {
            for c in &summary.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("spme {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
