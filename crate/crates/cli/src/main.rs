use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collapse_cli::{execute, exit_code, table, Command, Overrides};

#[derive(Parser)]
#[command(
    name = "collapse",
    version,
    about = "Energy-based state reduction: simulation and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Euler–Maruyama ensemble of the reduction equation
    Simulate(Flags),
    /// Closed-form solution (girsanov-scalar or girsanov-weighted)
    Exact(Flags),
    /// Dephasing master equation (lindblad-closed or lindblad-ode)
    Lindblad(Flags),
    /// Full statistical verification suite
    VerifyAll(Flags),
    /// Cross-validate two modes: --mode A --mode B
    Compare(Flags),
}

#[derive(clap::Args)]
struct Flags {
    /// Built-in fixture (qubit, spin-pair, spin-pair-mixture) or fixture JSON path
    #[arg(long)]
    fixture: Option<String>,
    /// JSON run configuration; flags take precedence over its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "n-traj")]
    n_traj: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores); never changes results
    #[arg(long)]
    workers: Option<usize>,
    /// Mode; give twice for `compare`
    #[arg(long)]
    mode: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Exact(f) => (Command::Exact, f),
        Sub::Lindblad(f) => (Command::Lindblad, f),
        Sub::VerifyAll(f) => (Command::VerifyAll, f),
        Sub::Compare(f) => (Command::Compare, f),
    };
    let overrides = Overrides {
        fixture: flags.fixture,
        seed: flags.seed,
        n_traj: flags.n_traj,
        dt: flags.dt,
        sigma: flags.sigma,
        out: flags.out,
        workers: flags.workers,
        modes: flags.mode,
    };
    let outcome = execute(command, flags.config.as_deref(), &overrides);
    match &outcome {
        Ok(report) => print!("{}", table::render(report)),
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&outcome) as u8)
}
