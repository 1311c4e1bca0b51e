//! Command-line entry point. Exit codes: 0 success, 1 usage or
//! configuration, 2 data or checkpoint, 3 training/evaluation/output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use mfdmc::commands;

#[derive(Parser)]
#[command(
    name = "mfdmc",
    about = "Multi-view clustered matrix factorization for rating prediction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset, train a model, and score the test split.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override one config key, e.g. --set train.seed=7. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Directory for the checkpoint, manifest, logs, and summary.
        #[arg(long, default_value = "mfdmc-run")]
        out: PathBuf,
    },
    /// Score an existing checkpoint on a split rebuilt from a manifest.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Checkpoint produced by train or baseline.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split manifest written next to the checkpoint.
        #[arg(long)]
        manifest: PathBuf,
        /// Which part of the split to score.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train a classic matrix factorization baseline on the same protocol.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// funk (factors only) or biased (adds mean and bias terms).
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "mfdmc-baseline")]
        out: PathBuf,
    },
    /// Write cluster assignments, embeddings, or a cluster report.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// assignments, embeddings, or clusters.
        #[arg(long)]
        what: String,
        /// user or item.
        #[arg(long, default_value = "user")]
        side: String,
        #[arg(long)]
        out: PathBuf,
        /// Needed for clusters: the run config for dataset access.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Needed for clusters: the split manifest of the training run.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck {
        /// Optional run config supplying model shape and loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap prints help to stdout and errors to stderr on its own
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Command::Train { config, set, out } => commands::cmd_train(config, set, out),
        Command::Evaluate {
            config,
            set,
            checkpoint,
            manifest,
            split,
        } => commands::cmd_evaluate(config, set, checkpoint, manifest, split),
        Command::Baseline {
            config,
            set,
            kind,
            out,
        } => commands::cmd_baseline(config, set, kind, out),
        Command::Export {
            checkpoint,
            what,
            side,
            out,
            config,
            set,
            manifest,
        } => commands::cmd_export(
            checkpoint,
            what,
            side,
            out,
            config.as_deref(),
            set,
            manifest.as_deref(),
        ),
        Command::Gradcheck { config, set, seed } => {
            commands::cmd_gradcheck(config.as_deref(), set, *seed)
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.stage.exit_code() as u8)
        }
    }
}
