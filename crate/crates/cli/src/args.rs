use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gnflow_core::flows::Architecture;
use gnflow_core::training::GraphMode;

#[derive(Parser, Debug)]
#[command(name = "gnflow", version, about = "Graph-conditioned neural flows for interacting time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a dataset on a random DAG.
    Generate(GenerateArgs),
    /// Train a flow and write its checkpoint, history, and learned graph.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Learn graphs from perturbed ground truth across noise levels.
    Study(StudyArgs),
    /// Time training epochs with and without the graph branch.
    Bench(BenchArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Resnet,
    Gru,
    Coupling,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Resnet => Architecture::Resnet,
            ArchArg::Gru => Architecture::Gru,
            ArchArg::Coupling => Architecture::Coupling,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphArg {
    Learned,
    Truth,
    None,
}

impl From<GraphArg> for GraphMode {
    fn from(g: GraphArg) -> Self {
        match g {
            GraphArg::Learned => GraphMode::Learned,
            GraphArg::Truth => GraphMode::GroundTruth,
            GraphArg::None => GraphMode::None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SystemArg {
    Sink,
    Triangle,
    Sawtooth,
    Square,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub system: SystemArg,
    #[arg(long)]
    pub nodes: usize,
    /// Observation times per sample.
    #[arg(long)]
    pub times: usize,
    #[arg(long)]
    pub samples: usize,
    /// Edge probability of the random DAG.
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    /// Fraction of (time, node) entries to hide.
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
    /// Defaults to `GNFLOW_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth DAG CSV; defaults to `<out>.dag.csv`.
    #[arg(long)]
    pub dag: Option<PathBuf>,
}

/// Settings shared by every training command. Precedence, lowest first:
/// built-in defaults, `GNFLOW_SEED`, the config file, `--set`, named flags.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub max_outer: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub graph: Option<GraphArg>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// The checkpoint's held-out test split.
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth DAG CSV; enables graph metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// Metrics file; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    pub sigmas: Vec<f64>,
    /// Repetition seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "resnet,gru,coupling")]
    pub archs: Vec<ArchArg>,
    /// Concurrent runs perturb each other's timings, so this defaults to 1.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
}
