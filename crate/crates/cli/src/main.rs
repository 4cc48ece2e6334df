//! Command-line entry point: synthetic data, pre-training, prompt tuning,
//! episodic evaluation and gradient checks.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use tagshot::losses::Mode;
use tagshot::{Error, Result};

use run_config::RunConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "tagshot", version, about = "Few- and zero-shot node classification on text-attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` settings file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dataset directory.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Checkpoint directory.
    #[arg(long, global = true, value_name = "DIR")]
    model: Option<PathBuf>,

    /// fewshot or zeroshot.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Combine positive and negative encoder probabilities for zero-shot decisions.
    #[arg(long, global = true)]
    prob_average: bool,

    /// Print the effective settings and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// Override one setting.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Negate analytic gradients in `gradcheck`.
    #[arg(long, global = true, hide = true)]
    inject_wrong_sign: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic text-attributed graph.
    Synth,
    /// Pre-train encoders and write a checkpoint plus per-step metrics.
    Pretrain,
    /// Tune a continuous class prompt on one few-shot episode.
    Tune,
    /// Evaluate a checkpoint on C-way K-shot episodes.
    Eval,
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(data) = &cli.data {
        cfg.data = data.clone();
    }
    if let Some(model) = &cli.model {
        cfg.model = model.clone();
    }
    if let Some(mode) = &cli.mode {
        cfg.pretrain.mode = mode.parse::<Mode>()?;
    }
    if cli.prob_average {
        cfg.task.prob_average = true;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Parse { file, .. } if file == "config" => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } | Error::InvalidGraph(_) => EXIT_IO,
        Error::NonFinite(_) | Error::Shape { .. } | Error::Invalid(_) => EXIT_NUMERIC,
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(0);
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg)?,
        Command::Pretrain => commands::pretrain_cmd(&cfg)?,
        Command::Tune => commands::tune(&cfg)?,
        Command::Eval => commands::eval(&cfg)?,
        Command::Gradcheck => {
            if !commands::gradcheck(&cfg, cli.inject_wrong_sign)? {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
