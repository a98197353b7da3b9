mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CommonArgs, ConfigError};

const AFTER_HELP: &str = "\
Levels: level l is the coarse mesh refined uniformly l times; --levels N runs
levels S..S+N-1 where S is --start-level.

Loads (--rhs): const:c (or const:c1,c2[,c3] per component), sine (the load of
u = prod sin(pi x_i)), random (piecewise constant, drawn from --seed), or
table:PATH (one value per coarse cell, inherited by refined cells).

CSV output: '#' header lines with the run's tolerances, then one row per level:
level, h, dofs_<space>..., then each quantity followed by <quantity>_rate where
rates apply. Floats carry 17 significant digits.

Environment: FEM_THREADS caps the number of worker threads.

Exit status: 0 when every requested check passes, 1 when a check fails,
2 on invalid configuration.";

#[derive(Parser)]
#[command(name = "ecrt", version, about = "CR, ECR and RT0 experiments on simplicial meshes", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Poisson problem with homogeneous Dirichlet data.
    Poisson(commands::PoissonArgs),
    /// Stokes problem with no-slip boundary.
    Stokes(commands::StokesArgs),
    /// Smallest Dirichlet Laplace eigenvalues.
    Eigen(commands::EigenArgs),
    /// Checks the exact relations between ECR, CR and RT0 solutions.
    Equiv(commands::EquivArgs),
    /// Error tables against exact solutions.
    Convergence(commands::ConvergenceArgs),
    /// Pure Neumann fixture u = x1^2 + x2^2 separating CR from RT0.
    Neumann(commands::NeumannArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Poisson(a) => &a.common,
            Command::Stokes(a) => &a.common,
            Command::Eigen(a) => &a.common,
            Command::Equiv(a) => &a.common,
            Command::Convergence(a) => &a.common,
            Command::Neumann(a) => &a.common,
        }
    }
}

fn setup_threads() -> Result<(), ConfigError> {
    // Sequential factorizations keep repeated runs bitwise identical.
    faer::set_global_parallelism(faer::Par::Seq);
    if let Ok(v) = std::env::var("FEM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ConfigError(format!("FEM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    setup_threads()?;
    cli.command.common().validate()?;
    match cli.command {
        Command::Poisson(a) => commands::poisson(&a),
        Command::Stokes(a) => commands::stokes(&a),
        Command::Eigen(a) => commands::eigen(&a),
        Command::Equiv(a) => commands::equiv(&a),
        Command::Convergence(a) => commands::convergence(&a),
        Command::Neumann(a) => commands::neumann(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
