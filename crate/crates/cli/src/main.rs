//! `cherryq` — train a toy LM, measure parameter heterogeneity, run
//! mixed-precision QAT, evaluate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error (missing or
//! corrupt input), 4 numeric failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cherryq::lm::Storage;
use cherryq::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::EvalSplit;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "cherryq", version, about = "Cherry-parameter analysis and mixed-precision QAT for a toy LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; missing keys take defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=10`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Corpus file (same as `--set data.corpus=PATH`).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(c) = &self.corpus {
            overrides.push(format!("data.corpus={}", toml::Value::String(c.display().to_string())));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StorageArg {
    F32,
    F16,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision base model.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(short, long, default_value = "runs/base")]
        out: PathBuf,
        /// Storage of the weights.
        #[arg(long, value_enum, default_value = "f32")]
        storage: StorageArg,
    },
    /// Impact maps, heterogeneity scores, scatter samples and cherry-set
    /// overlap between calibration splits.
    Analyze {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Second corpus for across-corpus overlap pairs.
        #[arg(long)]
        corpus_b: Option<PathBuf>,
        #[arg(short, long, default_value = "runs/analyze")]
        out: PathBuf,
        /// Also write the averaged impact maps (input for `cherryq --impacts`).
        #[arg(long)]
        save_maps: bool,
    },
    /// Mixed-precision QAT starting from a base checkpoint.
    Cherryq {
        base: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Precomputed impact maps from `analyze --save-maps`.
        #[arg(long)]
        impacts: Option<PathBuf>,
        #[arg(short, long, default_value = "runs/cherryq")]
        out: PathBuf,
        /// Also save the quantized model before any training step.
        #[arg(long)]
        step0: bool,
    },
    /// Perplexity of a checkpoint, as JSON on stdout.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
    },
    /// Average storage bits per parameter of the `[quant]` settings.
    Avgbits {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4096)]
        rows: usize,
        #[arg(long, default_value_t = 4096)]
        cols: usize,
    },
    /// Cherry-column overlap between two quantized checkpoints.
    Overlap { a: PathBuf, b: PathBuf },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainBase { cfg, out, storage } => {
            let storage = match storage {
                StorageArg::F32 => Storage::F32,
                StorageArg::F16 => Storage::F16,
            };
            commands::cmd_train_base(&cfg.resolve()?, &out, storage)
        }
        Command::Analyze {
            checkpoint,
            cfg,
            corpus_b,
            out,
            save_maps,
        } => commands::cmd_analyze(&cfg.resolve()?, &checkpoint, corpus_b.as_deref(), &out, save_maps),
        Command::Cherryq {
            base,
            cfg,
            impacts,
            out,
            step0,
        } => commands::cmd_cherryq(&cfg.resolve()?, &base, impacts.as_deref(), &out, step0),
        Command::Eval { checkpoint, cfg, split } => commands::cmd_eval(&cfg.resolve()?, &checkpoint, split),
        Command::Avgbits { cfg, rows, cols } => commands::cmd_avgbits(&cfg.resolve()?, rows, cols),
        Command::Overlap { a, b } => commands::cmd_overlap(&a, &b),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Corrupt { .. } | Error::ConfigMismatch { .. } | Error::Io { .. } => 3,
        Error::Numeric { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cherryq: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
