use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "gclab",
    about = "Numerical laboratory for the planar prescribed Gauss curvature equation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration (single top-level command object).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports, fields, and tables.
    #[arg(long, default_value = "gclab-out")]
    out: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the eigenvalue/eigenvector derivative formulas against the
    /// finite-difference oracle.
    EigenCheck(RunArgs),
    /// Solve the discrete equation with damped Newton.
    Solve(RunArgs),
    /// Solve, then produce the interior-bound estimate report.
    Estimate(RunArgs),
    /// Parameter sweep over families, radii, grids, and f scalings.
    Sweep(RunArgs),
    /// Mesh-refinement convergence study.
    Convergence(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::EigenCheck(a) => ("eigen-check", a),
        Command::Solve(a) => ("solve", a),
        Command::Estimate(a) => ("estimate", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Convergence(a) => ("convergence", a),
    };
    let code = gclab::cli::run(name, &args.config, &args.out, args.seed);
    ExitCode::from(code as u8)
}
