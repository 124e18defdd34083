//! `hrgnn`: data generation, training, evaluation, prediction, gradient
//! checking and graph inspection.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrgnn_core::data::Split;
use hrgnn_core::graph::RelationGroup;

#[derive(Parser, Debug)]
#[command(name = "hrgnn", version, about = "Hierarchical reasoning graph network for interview scoring")]
struct Cli {
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Switches that override the configuration's ablation section.
#[derive(Args, Debug, Default, Clone)]
pub struct AblationFlags {
    /// Drop the relational convolution layer.
    #[arg(long)]
    no_rgcn: bool,
    /// Drop the graph attention layer.
    #[arg(long)]
    no_rgat: bool,
    /// Remove a relation group from every session graph (RQQ, RAA or RQA).
    #[arg(long = "remove-relation", value_name = "GROUP")]
    remove_relation: Vec<RelationGroup>,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its split manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one model and write `checkpoint.bin` and `report.json`.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Metrics of a checkpoint on one split of the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Class probabilities for every interview of a JSON-Lines file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Compare backpropagated gradients with central differences on a toy
    /// interview.
    Gradcheck {
        /// Take model dimensions from this configuration instead of the
        /// small gradient-check defaults.
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the edge list of one session graph.
    GraphDump {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        /// Weights from this model instead of a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Interview id in the configured data.
        #[arg(long, conflicts_with_all = ["questions", "answers"])]
        interview: Option<String>,
        /// 1-based session index.
        #[arg(long, default_value_t = 1)]
        session: usize,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Number of question sentences of a structural graph.
        #[arg(long, requires = "answers")]
        questions: Option<usize>,
        /// Number of answer sentences of a structural graph.
        #[arg(long, requires = "questions")]
        answers: Option<usize>,
    },
    /// Train and test once per seed and aggregate the metrics.
    Multiseed {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        /// Comma-separated seeds replacing `training.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for `report.json` and `report.csv`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// One training run per point of the configuration's sweep grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        ablation: AblationFlags,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match commands::run(cli.command, cli.json) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
