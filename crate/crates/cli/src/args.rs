use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "icegan",
    version,
    about = "Blade-icing diagnosis from turbine SCADA data"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base seed.
    #[arg(long, global = true, env = "ICEGAN_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic SCADA export in the canonical CSV format.
    Synth(SynthArgs),
    /// Clean, balance, featurize and normalize raw exports into train/test sets.
    Preprocess(PreprocessArgs),
    /// Train a model and write its checkpoints and loss curves.
    Train(TrainArgs),
    /// Score a checkpoint on a test set.
    Eval(EvalArgs),
    /// Run several methods over several seeds and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShiftArg {
    None,
    SecondTurbine,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of records.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub icing_frac: Option<f64>,
    #[arg(long)]
    pub invalid_frac: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Sensor recalibration applied to the generated turbine.
    #[arg(long, value_enum)]
    pub shift: Option<ShiftArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    /// One turbine, user-supplied export.
    Single,
    /// Source and target turbines, user-supplied exports.
    Transfer,
    /// One synthetic turbine generated from the seed.
    WtSynth,
    /// Synthetic source turbine plus a recalibrated synthetic target turbine.
    WtSynthTransfer,
}

/// Where a command gets its experiment split from.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory written by `preprocess`.
    #[arg(long, conflicts_with_all = ["source", "target", "scenario"])]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scenario: Option<ScenarioArg>,
    /// Raw export of the (source) turbine.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Raw export of the target turbine.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Raw column manifest; defaults to the built-in one.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Framework {
    Pganc,
    Pgant,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub framework: Framework,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// Epoch budget of every training stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Verbatim,
    Swapped,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// ROC points CSV.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub score_convention: Option<ConventionArg>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated method names; defaults to every method the scenario supports.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Comma-separated seeds; defaults to five consecutive seeds from `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub score_convention: Option<ConventionArg>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}
