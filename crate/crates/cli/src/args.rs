use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prunekit::probe::Split;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Linear probing and LASSO-guided filter pruning")]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "PRUNEKIT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic face dataset.
    Synth(SynthArgs),
    /// Train a primary network on a class column.
    Train(TrainArgs),
    /// Fit linear probes on layer features.
    Probe(ProbeArgs),
    /// Probe accuracy of several networks on several tasks.
    Matrix(MatrixArgs),
    /// LASSO characteristic curves of one target.
    Curve(CurveArgs),
    /// Knee points of saved curves.
    Knee(KneeArgs),
    /// Truncate and prune a network.
    Prune(PruneArgs),
    /// Finetune a pruned regression network.
    Finetune(FinetuneArgs),
    /// Compression table row for a pruned network.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.5)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.25)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.25)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    pub fn split(&self) -> Split {
        Split {
            train: self.train_frac,
            val: self.val_frac,
            test: self.test_frac,
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub primary_count: Option<usize>,
    #[arg(long)]
    pub satellite_count: Option<usize>,
    #[arg(long)]
    pub identities: Option<usize>,
    /// Square image side.
    #[arg(long)]
    pub size: Option<usize>,
    /// Render every identity on a yaw grid with this step in degrees.
    #[arg(long)]
    pub pose_grid: Option<f64>,
    /// Attribute correlation as `a:b:rho`; repeatable.
    #[arg(long = "correlate")]
    pub correlations: Vec<String>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchArg {
    Vgg,
    LightCnn,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Vgg)]
    pub arch: ArchArg,
    #[arg(long, default_value = "identity")]
    pub task: String,
    /// Channel widths of the three stages, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    /// Emit the seeded random initialization without training.
    #[arg(long)]
    pub untrained: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    /// Task as `column`, `column:kind` (kind: regression, binary, binned,
    /// classes) or `a+b+c` for multilabel; repeatable.
    #[arg(long = "task")]
    pub tasks: Vec<String>,
    /// JSON list of task specs.
    #[arg(long)]
    pub tasks_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Layers to probe (default: every conv/MFM layer); repeatable.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    #[command(flatten)]
    pub tasks: TaskArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatrixArgs {
    /// Network as `name=path` or `path`; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Layer probed in every network (default: each network's deepest
    /// conv/MFM layer).
    #[arg(long)]
    pub layer: Option<String>,
    #[command(flatten)]
    pub tasks: TaskArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatArg {
    Gap,
    L2,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Layers (default: every conv/MFM layer); repeatable.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum, default_value_t = StatArg::Gap)]
    pub statistic: StatArg,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 1e4)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0.25)]
    pub heldout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    pub gamma: Vec<f64>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KneeArgs {
    /// Curve JSON written by `curve`; repeatable.
    #[arg(long = "curve", required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    pub gamma: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Ready-made plan JSON.
    #[arg(long, conflicts_with_all = ["curves", "truncation"])]
    pub plan: Option<PathBuf>,
    /// Curve JSON per layer to prune; repeatable.
    #[arg(long = "curve")]
    pub curves: Vec<PathBuf>,
    /// Layer to cut above (default: the curve with the lowest error).
    #[arg(long)]
    pub truncation: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the head as built instead of refitting it by least squares.
    #[arg(long)]
    pub no_refit: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Row label (default: the target column).
    #[arg(long)]
    pub attribute: Option<String>,
    /// Architecture label (default: the original network's name).
    #[arg(long)]
    pub arch: Option<String>,
    /// Skip the inference timings.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}
