use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pairtune", version, about = "Comparison-based configuration tuning with a human in the loop")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic surface, a space and a measured dataset.
    Gen(GenArgs),
    /// Train a comparator with a simulated expert.
    Train(TrainArgs),
    /// Compare variants on the standard synthetic surfaces.
    Ablate(AblateArgs),
    /// Sweep expert accuracy for one variant.
    Sensitivity(SensitivityArgs),
    /// Score a comparator on held-out configurations.
    Eval(EvalArgs),
    /// Search for a good configuration with a trained comparator as fitness.
    Tune(TuneArgs),
    /// Run the session service.
    Serve(ServeArgs),
    /// Re-fold a session event log and check it reproduces the trace.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl Common {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Kind {
    QuadraticBowl,
    Interaction,
    PlateauStep,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
pub enum LearnerKind {
    Svm,
    Centroid,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Space document; defaults to a unit hypercube of --dims parameters.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[arg(long, value_enum, default_value = "quadratic-bowl")]
    pub kind: Kind,
    #[arg(long, default_value_t = 200)]
    pub rows: usize,
    /// Standard deviation of measurement noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

/// Where the problem comes from: a run-config document, or a space plus a
/// surface or dataset.
#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub space: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["config", "dataset"])]
    pub surface: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Held-out configurations for CA/RA; 0 disables evaluation.
    #[arg(long = "test-n")]
    pub test_n: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DriverArgs {
    /// Expert-label budget.
    #[arg(long = "Q")]
    pub budget: Option<usize>,
    /// Batch size.
    #[arg(long = "q")]
    pub q: Option<usize>,
    /// Clusters per query slot.
    #[arg(long = "n")]
    pub n: Option<usize>,
    /// AL iterations per SSL step.
    #[arg(long = "P")]
    pub p: Option<usize>,
    /// Pseudolabels per SSL step.
    #[arg(long = "t")]
    pub t: Option<usize>,
    #[arg(long)]
    pub initial: Option<usize>,
    #[arg(long, value_enum)]
    pub learner: Option<LearnerKind>,
    /// SVM regularization.
    #[arg(long = "C")]
    pub c: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub driver: DriverArgs,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long = "expert-accuracy")]
    pub expert_accuracy: Option<f64>,
    #[arg(long)]
    pub abstain: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Number of replicate seeds.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long = "test-n")]
    pub test_n: Option<usize>,
    #[arg(long)]
    pub abstain: Option<f64>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[command(flatten)]
    pub driver: DriverArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated variants, or `all`.
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[arg(long = "expert-accuracy", default_value_t = 0.9)]
    pub expert_accuracy: f64,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9,1.0")]
    pub accuracies: Vec<f64>,
    #[arg(long, default_value = "cm-casl")]
    pub variant: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Model file, or `perfect` for a ground-truth comparator.
    #[arg(long)]
    pub model: String,
    /// Second model to normalize against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long = "crossover-rate")]
    pub crossover_rate: Option<f64>,
    #[arg(long = "mutation-rate")]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub elitism: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Seconds without a label before a session is suspended.
    #[arg(long = "label-timeout")]
    pub label_timeout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    /// Event log to fold.
    #[arg(long)]
    pub log: PathBuf,
    /// Trace to compare against; defaults to `trace.jsonl` next to the log.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}
