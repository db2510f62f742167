use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use invspkf::cli::{cmd_points, cmd_rcrlb, cmd_run, CliError, RunOverrides};

/// Forward and inverse sigma-point Kalman filter experiments.
#[derive(Parser)]
#[command(name = "invspkf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of replications.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of steps per run.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Number of worker threads for replications.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print a point rule as CSV (weight, then components).
    Points {
        /// Rule kind: cubature, gh (gauss_hermite) or unscented.
        kind: String,
        /// Dimensions: `cubature <n>`, `gh <m> <n>`, `unscented <n>`.
        dims: Vec<usize>,
        /// Spread parameter for the unscented rule.
        #[arg(long)]
        kappa: Option<f64>,
        /// Nodes per axis for the quadrature rule.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Print the forward bound recursion along a simulated trajectory.
    Rcrlb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            runs,
            seed,
            horizon,
            out_dir,
            workers,
        } => {
            let overrides = RunOverrides {
                runs,
                seed,
                horizon,
                out_dir,
                workers,
            };
            let artifacts = cmd_run(&config, &overrides)?;
            println!("{}", artifacts.steps_csv.display());
            println!("{}", artifacts.summary_json.display());
            Ok(())
        }
        Command::Points {
            kind,
            dims,
            kappa,
            m,
        } => {
            print!("{}", cmd_points(&kind, &dims, kappa, m)?);
            Ok(())
        }
        Command::Rcrlb {
            config,
            seed,
            horizon,
        } => {
            let overrides = RunOverrides {
                seed,
                horizon,
                ..RunOverrides::default()
            };
            print!("{}", cmd_rcrlb(&config, &overrides)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
