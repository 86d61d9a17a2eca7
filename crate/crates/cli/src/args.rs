use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "vhp",
    version,
    about = "Viral host prediction from nucleotide sequences"
)]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "VHP_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse corpora, drop rare hosts, and write the train/test split and folds.
    Prepare(PrepareArgs),
    /// Cross-validated training on a prepared directory.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled test set.
    Evaluate(EvaluateArgs),
    /// Host probabilities for unlabeled sequences.
    Predict(PredictArgs),
    /// Compare train and test corpora: alignment, k-mers, identity, composition.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// FASTA for .fa/.fasta/.fna/.ffn, otherwise CSV.
    Auto,
    Fasta,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnoseMode {
    Raw,
    Preprocessed,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    pub format: InputFormat,
    #[arg(long, default_value = "id")]
    pub id_column: String,
    #[arg(long, default_value = "sequence")]
    pub sequence_column: String,
    #[arg(long, default_value = "host")]
    pub host_column: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output directory (must not exist). Defaults to a new run directory
    /// under `<data-dir>/runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    /// FASTA or CSV corpora.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 100)]
    pub min_host_count: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub folds: u64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Directory written by `vhp prepare`.
    pub prepared: PathBuf,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(2..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub class_weights: Switch,
    #[arg(long, default_value_t = 400, value_parser = clap::value_parser!(u64).range(1..))]
    pub seq_len: u64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// LSTM units per direction.
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u64).range(1..))]
    pub hidden: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub dense_units: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Stop a fold after this many epochs without validation improvement.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub early_stop_patience: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled test corpus, or a prepared directory (its `test.csv` is used).
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// FASTA or CSV sequences; host labels are not needed.
    pub input: PathBuf,
    #[command(flatten)]
    pub input_format: InputArgs,
    /// Print predictions to standard output instead of `predictions.csv`.
    #[arg(long)]
    pub stdout: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    /// Training corpus, or a prepared directory (its `train.csv` and `test.csv` are used).
    #[arg(long)]
    pub train: PathBuf,
    /// Test corpus; required unless `--train` is a prepared directory.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub pairs: u64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DiagnoseMode::Both)]
    pub mode: DiagnoseMode,
    #[arg(long, default_value_t = 400, value_parser = clap::value_parser!(u64).range(1..))]
    pub seq_len: u64,
    /// Dataset name written in the table rows.
    #[arg(long, default_value = "dataset")]
    pub name: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::Diagnose(_) => "diagnose",
        }
    }

    /// Checks flag combinations clap cannot express.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Command::Prepare(a) => {
                if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
                    return Err(format!(
                        "--test-fraction must lie strictly between 0 and 1, got {}",
                        a.test_fraction
                    ));
                }
            }
            Command::Train(a) => {
                if let Some(p) = a.early_stop_patience {
                    if p >= a.epochs {
                        return Err(format!(
                            "--early-stop-patience {p} must be smaller than --epochs {}",
                            a.epochs
                        ));
                    }
                }
                if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
                    return Err("--learning-rate must be positive".into());
                }
            }
            Command::Predict(a) => {
                if a.stdout && a.output.out.is_some() {
                    return Err("--stdout and --out cannot be combined".into());
                }
            }
            Command::Diagnose(a) => {
                if a.test.is_none() && !a.train.is_dir() {
                    return Err("--test is required unless --train is a prepared directory".into());
                }
            }
            Command::Evaluate(_) => {}
        }
        Ok(())
    }
}
