use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::Context;
use config::{parse_modes, parse_seeds, ExperimentConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; exit code 2.
    Config(String),
    /// Failure while running; exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<sketret_core::Error> for CliError {
    fn from(e: sketret_core::Error) -> Self {
        use sketret_core::Error::*;
        match e {
            InvalidSpec(_) | InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sketret", version, about = "Toy zero-shot sketch-based image retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output directory (default: $SKETRET_OUT, then ./sketret-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// zs, gzs or both.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset.
    Generate,
    /// Train one checkpoint per seed.
    Train,
    /// Score checkpoints on the retrieval protocol.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss and component ablation over seeds.
    Ablate,
    /// Divergence ordering report for trained checkpoints.
    Theory {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Similarity matrices and loss curves as CSV.
    Plot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        config.apply_override(kv)?;
    }
    if cli.seed.is_some() && cli.seeds.is_some() {
        return Err(CliError::Config("give --seed or --seeds, not both".into()));
    }
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
    }
    if let Some(s) = &cli.seeds {
        config.seeds = parse_seeds(s)?;
    }
    if let Some(m) = &cli.mode {
        config.modes = parse_modes(m)?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = build_config(&cli)?;
    let checkpoint = match &cli.command {
        Command::Eval { checkpoint } | Command::Theory { checkpoint } | Command::Plot { checkpoint } => {
            checkpoint.clone()
        }
        _ => None,
    };
    let ctx = Context {
        out: config.out_dir(cli.out.as_deref()),
        config,
        force: cli.force,
        checkpoint,
    };
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Eval { .. } => commands::eval_cmd(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::Theory { .. } => commands::theory(&ctx),
        Command::Plot { .. } => commands::plot(&ctx),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, matching the config-error code
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
