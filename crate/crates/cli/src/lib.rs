//! Library side of the `stgin` command: argument definitions, run
//! configuration and the four subcommands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stgin_core::Error;

pub use config::RunConfig;

/// Failure of a command, mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 configuration/validation, 3 data format, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::Format { .. } | Error::Data(_) => 3,
                Error::Training { .. } => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stgin", version, about = "Spatio-temporal traffic speed forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the adjacency matrix from a road-length matrix.
    BuildGraph(CommonArgs),
    /// Generate a synthetic corridor dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint with its loss trace.
    Train(CommonArgs),
    /// Score a checkpoint and the reference forecasters on the test split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub speeds: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub kappa_percentile: Option<f64>,
    /// Train or evaluate without spatial mixing (self-loops only).
    #[arg(long)]
    pub no_graph: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to score; defaults to `<output_dir>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Extra checkpoint scored on the self-loop graph as the no-graph
    /// ablation.
    #[arg(long)]
    pub ablation_checkpoint: Option<PathBuf>,
    /// Node indices whose truth/prediction series are written.
    #[arg(long = "node", value_delimiter = ',')]
    pub nodes: Vec<usize>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl CommonArgs {
    /// Loads the configuration file and applies `--set` and named flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut sets = self.set.clone();
        let path = |p: &PathBuf| p.display().to_string();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push((k.to_string(), v));
            }
        };
        let quoted = |p: &PathBuf| toml::Value::String(path(p)).to_string();
        push("output_dir", self.output_dir.as_ref().map(quoted));
        push("data.speeds", self.speeds.as_ref().map(quoted));
        push("data.distances", self.distances.as_ref().map(quoted));
        push("data.adjacency", self.adjacency.as_ref().map(quoted));
        push("train.seed", self.seed.map(|v| v.to_string()));
        push("model.input_len", self.input_len.map(|v| v.to_string()));
        push("model.horizon", self.horizon.map(|v| v.to_string()));
        push("train.iterations", self.iterations.map(|v| v.to_string()));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push("train.learning_rate", self.learning_rate.map(|v| format!("{v:?}")));
        push("graph.kappa_percentile", self.kappa_percentile.map(|v| format!("{v:?}")));
        if self.no_graph {
            push("graph.use_graph", Some("false".into()));
        }
        RunConfig::load(self.config.as_deref(), &sets)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildGraph(a) => commands::build_graph(&a.resolve()?).map(|_| ()),
        Command::Synth(a) => {
            let mut cfg = a.common.resolve()?;
            if let Some(n) = a.nodes {
                cfg.synth.nodes = n;
            }
            if let Some(d) = a.days {
                cfg.synth.days = d;
            }
            if let Some(s) = a.common.seed {
                cfg.synth.seed = s;
            }
            commands::synth(&cfg).map(|_| ())
        }
        Command::Train(a) => commands::train(&a.resolve()?).map(|_| ()),
        Command::Evaluate(a) => {
            let mut cfg = a.common.resolve()?;
            if !a.nodes.is_empty() {
                cfg.evaluate.nodes = a.nodes.clone();
            }
            let ck = a
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(commands::CHECKPOINT_FILE));
            commands::evaluate(&cfg, &ck, a.ablation_checkpoint.as_deref()).map(|_| ())
        }
    }
}
