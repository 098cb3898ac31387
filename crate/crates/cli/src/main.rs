mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub use error::CliError;

/// Environment variable naming the compute device. Only `cpu` exists.
pub const DEVICE_ENV: &str = "DCSEG_DEVICE";

#[derive(Parser, Debug)]
#[command(
    name = "dcseg",
    version,
    about = "Multimodal 3D segmentation robust to missing modalities",
    after_help = "Exit codes: 0 success, 1 I/O error, 2 invalid configuration or input data, \
                  3 training diverged, 4 gradient check failed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset in BraTS directory layout.
    Generate {
        /// Run config with a `[dataset.phantom]` source, or a bare phantom spec.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects; defaults to the run config's phantom count.
        #[arg(long)]
        count: Option<usize>,
        /// First subject seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Disable a loss term; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Term>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on every modality subset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `final.ckpt` in the config's output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory evaluated in full, overriding the config source.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Report directory; defaults to `eval` under the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate only this modality subset, e.g. `FLAIR,T1`.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Check every analytic loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Analytic SSIM `c1` override for negative-control runs.
        #[arg(long, hide = true)]
        fault_ssim_c1: Option<f64>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Term {
    Ana,
    Mod,
    Rec,
    Reg,
}

fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            Err(CliError::config(DEVICE_ENV, format!("unknown device `{d}`; available: cpu")))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    check_device()?;
    match cli.command {
        Command::Generate {
            config,
            out,
            count,
            seed,
        } => commands::generate(&config, &out, count, seed),
        Command::Train {
            config,
            ablate,
            seed,
            out,
            resume,
        } => {
            let terms: Vec<&str> = ablate
                .iter()
                .map(|t| match t {
                    Term::Ana => "ana",
                    Term::Mod => "mod",
                    Term::Rec => "rec",
                    Term::Reg => "reg",
                })
                .collect();
            commands::train(&config, &terms, seed, out, resume)
        }
        Command::Eval {
            config,
            checkpoint,
            dataset,
            out,
            subset,
        } => commands::eval(commands::EvalArgs {
            config,
            checkpoint,
            dataset,
            out,
            subset,
        }),
        Command::Gradcheck { seed, fault_ssim_c1 } => commands::gradcheck(seed, fault_ssim_c1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(&e)
        }
    }
}
