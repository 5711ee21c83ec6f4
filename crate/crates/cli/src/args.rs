use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const ROOT_ENV: &str = "GRUFCN_UCR_ROOT";

#[derive(Debug, Parser)]
#[command(name = "grufcn", version)]
#[command(about = "Train, evaluate and compare GRU-FCN univariate time-series classifiers")]
#[command(long_about = "Train, evaluate and compare GRU-FCN univariate time-series classifiers.

Datasets are read in UCR archive format from an archive root laid out as
<root>/<Name>/<Name>_TRAIN[.txt|.tsv] and <Name>_TEST[.txt|.tsv]. The root
comes from --root, or from the GRUFCN_UCR_ROOT environment variable.

Exit status is 0 on success and 1 on any error; errors go to standard error,
everything else (results, progress, warnings) to standard output.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write history, checkpoints and a run summary
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(EvalArgs),
    /// Print parameter counts of the GRU-FCN and LSTM-FCN variants
    Params(ParamsArgs),
    /// Rank models from an error matrix and run pairwise significance tests
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Cell {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Missing {
    /// Rank missing entries out; other models are ranked among those present
    Exclude,
    /// Missing entries tie for the worst ranks
    Worst,
}

/// Where a dataset comes from: a registry name under an archive root, or
/// explicit split files.
#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset name from the built-in registry (archive directory names are also accepted)
    #[arg(long, value_name = "NAME", required_unless_present = "train")]
    pub dataset: Option<String>,

    /// UCR archive root directory
    #[arg(long, value_name = "DIR", env = ROOT_ENV, hide_env_values = true)]
    pub root: Option<PathBuf>,

    /// Explicit training split file (use together with --test)
    #[arg(long, value_name = "FILE", requires = "test")]
    pub train: Option<PathBuf>,

    /// Explicit test split file (use together with --train)
    #[arg(long, value_name = "FILE", requires = "train")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = "Run settings resolve as: command-line flag, then the dataset's registry entry, \
then the built-in default. Built-in defaults: --epochs 2000, --train-batch 128, --test-batch 128.
The test batch is capped at the test-set size.")]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,

    /// Seed for weight initialization, shuffling and dropout
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,

    /// Number of epochs [default: registry, else 2000]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,

    /// Training mini-batch size [default: registry, else 128]
    #[arg(long, value_name = "N")]
    pub train_batch: Option<usize>,

    /// Evaluation chunk size [default: registry, else 128]
    #[arg(long, value_name = "N")]
    pub test_batch: Option<usize>,

    /// Initial learning rate; decays by 0.8 every 100 epochs down to 1e-4
    #[arg(long, value_name = "RATE", default_value_t = 0.01)]
    pub lr: f64,

    /// Dropout rate after the recurrent branch
    #[arg(long, value_name = "RATE", default_value_t = 0.8)]
    pub dropout: f64,

    /// Recurrent cell
    #[arg(long, value_enum, default_value_t = Cell::Gru)]
    pub cell: Cell,

    /// Recurrent hidden size
    #[arg(long, value_name = "N", default_value_t = 8)]
    pub hidden: usize,

    /// Output directory [default: runs/<dataset>/seed-<seed>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Print progress every N epochs (0 for none)
    #[arg(long, value_name = "N", default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DatasetArgs,

    /// Evaluation chunk size [default: registry, else 128]
    #[arg(long, value_name = "N")]
    pub test_batch: Option<usize>,

    /// Write per-sample predictions to this CSV file
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Registry dataset to report (repeatable)
    #[arg(long, value_name = "NAME", conflicts_with = "all")]
    pub dataset: Vec<String>,

    /// Report every registry dataset plus a total row
    #[arg(long)]
    pub all: bool,

    /// Compare against a reference CSV with columns dataset,gru_fcn,lstm_fcn
    #[arg(long, value_name = "CSV")]
    pub check: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Error matrix CSV: header dataset,<model>,...; empty field = missing
    #[arg(long, value_name = "CSV")]
    pub errors: PathBuf,

    /// CSV with a `classes` column keyed by dataset name [default: built-in registry]
    #[arg(long, value_name = "CSV")]
    pub classes: Option<PathBuf>,

    /// How missing entries are ranked
    #[arg(long, value_enum, default_value_t = Missing::Exclude)]
    pub missing: Missing,

    /// Significance level for the critical difference (0.05 or 0.10)
    #[arg(long, value_name = "ALPHA", default_value_t = 0.05)]
    pub alpha: f64,

    /// Directory for ranks.csv, wilcoxon.csv and cd.svg
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
