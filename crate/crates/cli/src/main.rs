use std::path::PathBuf;
use std::process::ExitCode;

use bayescal_cli::commands::{cmd_calibrate, cmd_design, cmd_forecast, cmd_validate};
use bayescal_cli::config::RunConfig;
use bayescal_cli::plotdata::cmd_plotdata;
use bayescal_cli::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bayescal", version, about = "Bayesian calibration of numerical codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap on concurrent workers (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Start the second sampler stage from the initial point.
    #[arg(long)]
    mh_restart_init: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate and write a result directory.
    Calibrate(RunArgs),
    /// Calibrate with leave-one-out cross-validation.
    Validate(RunArgs),
    /// Predict over new inputs from a result directory.
    Forecast {
        #[arg(long)]
        result: PathBuf,
        /// CSV with columns x1..xd.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enrich the emulator design by expected improvement.
    Design {
        #[command(flatten)]
        run: RunArgs,
        /// Points to add.
        #[arg(long)]
        k: usize,
    },
    /// Export plot data from a result directory.
    Plotdata {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.estim.mh_restart_init |= args.mh_restart_init;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(CliError::runtime)?;
    }
    match cli.command {
        Command::Calibrate(args) => {
            let out = cmd_calibrate(&load(&args)?)?;
            print!("{}", out.summary);
            println!("\nResults written to {}", out.dir.display());
        }
        Command::Validate(args) => {
            let out = cmd_validate(&load(&args)?)?;
            print!("{}", out.summary);
            println!("\nResults written to {}", out.dir.display());
        }
        Command::Forecast { result, inputs, out } => {
            let path = cmd_forecast(&result, &inputs, out.as_deref())?;
            println!("Forecast written to {}", path.display());
        }
        Command::Design { run, k } => {
            let dir = cmd_design(&load(&run)?, k)?;
            println!("Design written to {}", dir.display());
        }
        Command::Plotdata { result, out } => {
            let dir = cmd_plotdata(&result, out.as_deref())?;
            println!("Plot data written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
