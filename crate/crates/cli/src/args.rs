use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pht", version, about = "Patient health timeline pipeline", args_override_self = true)]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with known outcome probabilities.
    Synth(SynthArgs),
    /// Fit the vocabulary and quantile bins, split the cohort and tokenize it.
    Tokenize(TokenizeArgs),
    /// Corpus statistics for a tokenized file.
    Stats(StatsArgs),
    /// Train (or continue training) a model on a tokenized corpus.
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Monte Carlo risk estimates for one subject or every subject of a corpus.
    Simulate(SimulateArgs),
    /// Risk trajectory of one subject over its timeline.
    Ares(AresArgs),
    /// Rank the largest risk changes of a trajectory and the tokens behind them.
    Trajectory(TrajectoryArgs),
    /// Discrimination and calibration metrics for a predictions file.
    Eval(EvalArgs),
    /// Check the Monte Carlo estimator against a rigged Bernoulli model.
    McVerify(McVerifyArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Tokenize(_) => "tokenize",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Gradcheck(_) => "gradcheck",
            Command::Simulate(_) => "simulate",
            Command::Ares(_) => "ares",
            Command::Trajectory(_) => "trajectory",
            Command::Eval(_) => "eval",
            Command::McVerify(_) => "mc-verify",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Generator spec (JSON); the built-in cohort when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n_subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Existing vocabulary to reuse; `bins.json` is read from the same directory.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of initialising.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 4e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.018)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Check at this checkpoint's parameters instead of a random desk model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 64)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Uniform noise added to the initial parameters before checking.
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelInputs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Tokenized corpus holding the subjects to score.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulationFlags {
    #[arg(long, default_value_t = 100)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 4096)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Task file (JSON); the built-in presets when absent.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Prolonged-stay threshold for the presets.
    #[arg(long, default_value_t = 10.0)]
    pub ps_days: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub sim: SimulationFlags,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value = "HM")]
    pub task: String,
    /// Score only this subject and write a simulation report.
    #[arg(long)]
    pub subject: Option<String>,
    /// Context length; defaults to the task's anchor.
    #[arg(long)]
    pub position: Option<usize>,
    /// Oracle sidecar CSV whose `p_death` column is attached as a reference.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Also write every generated trajectory (single-subject mode).
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AresArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub sim: SimulationFlags,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Subject to replay; the first one in the corpus when absent.
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Comma-separated tasks; the task file's run list when absent.
    #[arg(long, value_delimiter = ',')]
    pub run: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrajectoryArgs {
    /// `trajectory.json` written by `ares`.
    #[arg(long)]
    pub trajectory: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value = "HM")]
    pub task: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// CSV with `score` and `label` columns, optionally `group` and `reference`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct McVerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub p: f64,
    /// Simulations per estimate.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Tolerance on the mean estimate, in standard errors.
    #[arg(long, default_value_t = 4.0)]
    pub sigmas: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
