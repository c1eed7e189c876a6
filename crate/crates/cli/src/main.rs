//! `flame` command-line runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flame_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "flame",
    version,
    about = "Frozen/learnable modular-ensemble sequential recommendation"
)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Force sequential numerics (recorded in the run manifest).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Config overrides in --key=value form.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY=VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a tab-separated interaction log and cache the filtered dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/dataset.bin`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Train the single network that later serves as the frozen anchor.
    Pretrain {
        #[command(flatten)]
        rest: Overrides,
    },
    /// Train the configured mode.
    Train {
        /// Pretrain a frozen network first when the mode needs one.
        #[arg(long)]
        pretrain_first: bool,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate every decision path against the frozen network too.
        #[arg(long)]
        all_paths: bool,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Run several modes side by side and write their traces and PER matrices.
    Diagnose {
        #[command(flatten)]
        rest: Overrides,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Parse { .. }
        | Error::EmptyLog
        | Error::EmptyDataset
        | Error::Format(_)
        | Error::Io { .. }
        | Error::Index(_) => 2,
        Error::NonFinite(_) | Error::Shape { .. } | Error::Contract(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
