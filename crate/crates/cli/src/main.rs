//! `robustbf`: dataset generation, training, evaluation curves, power
//! minimization and timing, all emitting CSV.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical abort.
//! `ROBUSTBF_THREADS` sets the worker thread count.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustbf::training::Mode;

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "robustbf", version, about = "Robust MU-MISO downlink beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Sets both `seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes `<mode>.ckpt.json` and `<mode>.history.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// proposed | s_zero | rzf_power_only | direct_dnn
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mean rate quantile against transmit power for each checkpoint.
    RateCurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// start:end:step in dBm, or a comma-separated list.
        #[arg(long, default_value = "0:35:5")]
        p_grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical CDF of the minimum rate on one test channel.
    Cdf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel_index: usize,
        #[arg(long, default_value_t = 2000)]
        errors: usize,
        /// Transmit power in dBm (defaults to `eval.cdf_power_dbm`).
        #[arg(long)]
        p_dbm: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimum transmit power and feasibility against rate targets.
    PowerMin {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// start:end:step in Mbps, or a comma-separated list.
        #[arg(long, default_value = "5:12:1")]
        rate_targets: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time single forward passes and power-minimization searches.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}`"))
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ROBUSTBF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("ROBUSTBF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen { common, out } => commands::gen(&common.load()?, &out),
        Command::Train {
            common,
            data,
            mode,
            out,
            resume,
        } => {
            let paths = commands::train(&common.load()?, data.data.as_deref(), mode, &out, resume.as_deref())?;
            println!("wrote {} and {}", paths.checkpoint.display(), paths.history.display());
            Ok(())
        }
        Command::RateCurve {
            common,
            data,
            checkpoints,
            p_grid,
            out,
        } => commands::rate_curve(&common.load()?, data.data.as_deref(), &checkpoints, &p_grid, out.as_deref()),
        Command::Cdf {
            common,
            data,
            checkpoint,
            channel_index,
            errors,
            p_dbm,
            out,
        } => commands::cdf(
            &common.load()?,
            data.data.as_deref(),
            &checkpoint,
            channel_index,
            errors,
            p_dbm,
            out.as_deref(),
        ),
        Command::PowerMin {
            common,
            data,
            checkpoint,
            rate_targets,
            out,
        } => commands::power_min(&common.load()?, data.data.as_deref(), &checkpoint, &rate_targets, out.as_deref()),
        Command::Bench {
            common,
            data,
            checkpoint,
            n,
            out,
        } => commands::bench(&common.load()?, data.data.as_deref(), &checkpoint, n, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
