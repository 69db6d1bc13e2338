//! `treecaps` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a run fails after its inputs were
//! accepted, 2 for invalid inputs or configuration.

mod commands;
mod data;
mod failure;

use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "treecaps",
    version,
    about = "Classify programs from their syntax trees with capsule networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a labelled corpus into train/val/test files with a vocabulary
    /// and class manifest.
    #[command(group(ArgGroup::new("source").required(true).args(["input", "synthetic_spec"])))]
    Prepare {
        /// JSON-lines dataset of `{"label": .., "tree": ..}` records.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Class names for `--input`, one label per line in label order.
        #[arg(long, requires = "input")]
        classes: Option<PathBuf>,
        /// Grammar file to sample a synthetic corpus from.
        #[arg(long)]
        synthetic_spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples_per_class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train, validation and test fractions.
        #[arg(
            long,
            default_value = "0.8,0.1,0.1",
            value_delimiter = ',',
            num_args = 1
        )]
        split: Vec<f64>,
    },
    /// Pretrain node-type embeddings with skip-gram on a prepared dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 0.025)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model, or an ensemble, from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: commands::TrainOverrides,
    },
    /// Evaluate checkpoints on a dataset; several checkpoints are also
    /// evaluated as a weighted ensemble.
    Evaluate {
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the members' validation accuracies.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ensemble_weights: Option<Vec<f64>>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print class probabilities for one tree document.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tree: PathBuf,
    },
    /// Train a grid of settings for one parameter, several trials each, and
    /// report mean and standard deviation of test accuracy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path into the training config, e.g. `model.code_dim`, or
        /// one of the aliases `D_cc` and `variant`.
        #[arg(long)]
        param: String,
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            input,
            classes,
            synthetic_spec,
            samples_per_class,
            out,
            seed,
            split,
        } => commands::prepare(commands::PrepareArgs {
            input,
            classes,
            synthetic_spec,
            samples_per_class,
            out,
            seed,
            split,
        }),
        Command::Pretrain {
            data,
            dim,
            epochs,
            negatives,
            learning_rate,
            seed,
            out,
        } => commands::pretrain(
            &data,
            &treecaps::embeddings::SkipGramConfig {
                dim,
                epochs,
                negatives,
                learning_rate,
                seed,
            },
            &out,
        ),
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Evaluate {
            checkpoints,
            data,
            ensemble_weights,
            out,
        } => commands::evaluate(&checkpoints, &data, ensemble_weights, out.as_deref()),
        Command::Predict { checkpoint, tree } => commands::predict(&checkpoint, &tree),
        Command::Sweep {
            config,
            param,
            values,
            trials,
            out,
        } => commands::sweep(&config, &param, &values, trials, out.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
