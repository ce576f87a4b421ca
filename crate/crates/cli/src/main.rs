//! `covtune` command-line frontend.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covtune::datagen::ProblemKind;
use covtune::Error;

#[derive(Parser, Debug)]
#[command(
    name = "covtune",
    version,
    about = "Observation-error covariance specification toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Individual key=value overrides, applied after the configuration file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an observation dataset.
    Generate {
        #[arg(long)]
        kind: ProblemKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train an LSTM on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss curve goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        input_steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run paired twin experiments.
    Assimilate(commands::AssimilateArgs),
    /// Describe a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::VersionMismatch { .. } => 3,
        Error::Config(_)
        | Error::ConfigMismatch(_)
        | Error::Domain(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyInput(_)
        | Error::DatasetTooSmall { .. }
        | Error::EnsembleTooSmall(_)
        | Error::CflViolation { .. } => 2,
        _ => 4,
    }
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("COVTUNE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("COVTUNE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("COVTUNE_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Generate { kind, n, out, common } => commands::generate(kind, n, &out, &common),
        Command::Train {
            data,
            out,
            input_steps,
            epochs,
            batch,
            patience,
            hidden,
            lr,
            common,
        } => commands::train(
            &data,
            &out,
            commands::TrainFlags {
                input_steps,
                epochs,
                batch,
                patience,
                hidden,
                lr,
            },
            &common,
        ),
        Command::Assimilate(args) => commands::assimilate(&args),
        Command::Inspect { path } => commands::inspect(&path),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
