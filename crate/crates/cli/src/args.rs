use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use neuromod_core::scoring::{Direction, SelectionMode};
use neuromod_core::toy::{Split, Task};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "neuromod", version, about = "Neuron scoring, selection, clustering and overlap analysis for transformer MLPs")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Print a machine-readable JSON summary on stdout
    #[arg(long, global = true)]
    pub json: bool,

    /// Worker threads (default: available parallelism)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file with one table per subcommand; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Collect mean-|activation| statistics from a toy model, or merge stats shards
    Stats(StatsArgs),
    /// Score neurons as ref_mean / (epsilon + unlearn_mean)
    Score(ScoreArgs),
    /// Select the top fraction of neurons from a score map
    Select(SelectArgs),
    /// Find the smallest fraction whose pruning reaches a target accuracy drop
    Calibrate(CalibrateArgs),
    /// Balanced k-means clustering of each layer's W_in neuron vectors
    Cluster(ClusterArgs),
    /// Pairwise overlap |N_i & N_j| / |N_i| between selections
    Overlap(OverlapArgs),
    /// Lorenz-curve AUC of selections against a clustering, per layer
    Lorenz(LorenzArgs),
    /// Generate a synthetic dataset and train (or just initialize) a toy model
    ToyTrain(ToyTrainArgs),
    /// Top-1 accuracy of a toy model per subtask, optionally under a pruning selection
    ToyEval(ToyEvalArgs),
    /// Render SVG figures from overlap and AUC artifacts
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    GlobalTop,
    PerLayerEqual,
}

impl From<ModeArg> for SelectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::GlobalTop => SelectionMode::GlobalTop,
            ModeArg::PerLayerEqual => SelectionMode::PerLayerEqual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionArg {
    /// Neurons most active on the unlearn set relative to the reference
    Lowest,
    Highest,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Lowest => Direction::LowestScore,
            DirectionArg::Highest => Direction::HighestScore,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Classification,
    NextToken,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::NextToken => Task::NextToken,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Toy model checkpoint
    #[arg(long, requires = "dataset", conflicts_with = "merge")]
    pub model: Option<PathBuf>,
    /// Toy dataset archive
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Subtask name or index; every subtask when omitted
    #[arg(long)]
    pub subtask: Option<String>,
    /// Stats archives to merge (e.g. exporter shards), instead of --model
    #[arg(long, num_args = 1..)]
    pub merge: Vec<PathBuf>,
    /// Output stats archive; a manifest is written next to it with a .json extension
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Reference stats archive
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Unlearn stats archive
    #[arg(long)]
    pub unlearn: PathBuf,
    #[arg(long, default_value_t = neuromod_core::scoring::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value = "per-layer-equal")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "lowest")]
    pub direction: DirectionArg,
    /// Selection JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    /// Subtask whose accuracy drop is calibrated
    #[arg(long)]
    pub subtask: String,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.2)]
    pub target_drop: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value = "global-top")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "lowest")]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 1.0)]
    pub max_fraction: f64,
    /// Calibration result JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the chosen selection on its own
    #[arg(long)]
    pub selection_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    /// W_in weights archive (`w_in.{layer}` tensors) or a toy model checkpoint
    #[arg(long)]
    pub weights: PathBuf,
    /// Clusters per layer
    #[arg(long, conflicts_with = "cluster_size")]
    pub k: Option<usize>,
    /// Neurons per cluster; k = width / size
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = neuromod_core::moefication::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Cluster JSON; the assignment archive is written next to it with a .nmod extension
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OverlapArgs {
    /// Selection JSON files, in matrix order
    #[arg(long = "selection", required = true, num_args = 1..)]
    pub selections: Vec<PathBuf>,
    /// Labels, one per selection (default: file stems)
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Output path; `.csv` writes CSV, anything else JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LorenzArgs {
    /// Selection JSON files (per-layer-equal mode)
    #[arg(long = "selection", required = true, num_args = 1..)]
    pub selections: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Cluster JSON from `cluster`
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyTrainArgs {
    #[arg(long, value_enum, default_value = "classification")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 4)]
    pub subtasks: usize,
    /// Symmetric relatedness entries `i,j,r`; unlisted pairs are 0 (default: the built-in 4-subtask layout)
    #[arg(long, value_name = "I,J,R")]
    pub related: Vec<String>,
    #[arg(long, default_value_t = 512)]
    pub samples_per_subtask: usize,
    #[arg(long, default_value_t = 512)]
    pub eval_samples_per_subtask: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub model_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub mlp_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Model initialization seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// SGD steps; 0 keeps the random initialization
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Batch-order seed
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    /// Writes model.nmod, dataset.nmod, dataset.json and train.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
    /// Selection whose neurons are pruned
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Overlap JSON files; one heatmap each
    #[arg(long = "overlap", num_args = 1..)]
    pub overlaps: Vec<PathBuf>,
    /// Lorenz JSON files; one AUC line plot each
    #[arg(long = "auc", num_args = 1..)]
    pub aucs: Vec<PathBuf>,
    /// Trained-model overlap JSON for the sorted difference plot
    #[arg(long, requires = "random_overlap")]
    pub trained_overlap: Option<PathBuf>,
    /// Random-model overlap JSON for the sorted difference plot
    #[arg(long, requires = "trained_overlap")]
    pub random_overlap: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}
