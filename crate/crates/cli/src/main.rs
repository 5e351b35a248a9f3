//! `domus`: synthetic data, pretraining, fine-tuning and transfer evaluation
//! for smart-home event streams.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "domus", version, about = "Foundation model pipeline for smart-home sensor events")]
struct Cli {
    /// Overrides the seed of the config file or synthetic spec.
    #[arg(long, env = "DOMUS_SEED", global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` with a dotted key, e.g. `model.d=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset name (file stem) held out of pretraining.
    #[arg(long)]
    held_out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a home and write its canonical event CSV.
    Synth {
        /// TOML home specification.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Built-in home: home_a, home_b or home_c.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pretrain on every configured dataset except the held-out one.
    Pretrain(RunArgs),
    /// Fine-tune a pretrained checkpoint on the held-out dataset and save the tuned models.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the transfer protocol on the held-out dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Validate a TSV attribute embedding table.
    EmbedTableCheck { path: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    let load = |r: &RunArgs| RunConfig::load(r.config.as_deref(), &r.overrides, cli.seed);
    match &cli.command {
        Command::Synth { spec, preset, out } => commands::synth(spec.as_deref(), preset.as_deref(), out, cli.seed),
        Command::Pretrain(r) => commands::pretrain(&load(r)?, r.held_out.as_deref()),
        Command::Finetune { run, checkpoint } => commands::finetune(&load(run)?, checkpoint, run.held_out.as_deref()),
        Command::Eval { run, checkpoint } => commands::eval(&load(run)?, checkpoint, run.held_out.as_deref()),
        Command::EmbedTableCheck { path } => commands::embed_table_check(path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
