use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use factsurv_nn::train::Solver;
use factsurv_nn::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "factsurv", version, about = "Survival models of driver idle time")]
pub struct Cli {
    /// Seed for every random choice; replaces the seeds in config files.
    #[arg(long, global = true, env = "FACT_SEED")]
    pub seed: Option<u64>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Scale and window a dataset, then split it chronologically.
    Prep(PrepArgs),
    /// Kaplan-Meier curves per stratum and pairwise log-rank tests.
    Km(KmArgs),
    /// Train a model on prepared data.
    Fit(FitArgs),
    /// Evaluate a checkpoint on prepared data.
    Eval(EvalArgs),
    /// Architecture grid search.
    Grid(GridArgs),
    /// Feature-group and history ablations.
    Ablate(AblateArgs),
    /// Attention paid by the target position to each history position.
    Attention(AttentionArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Prep(_) => "prep",
            Command::Km(_) => "km",
            Command::Fit(_) => "fit",
            Command::Eval(_) => "eval",
            Command::Grid(_) => "grid",
            Command::Ablate(_) => "ablate",
            Command::Attention(_) => "attention",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (TOML); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; the ground truth goes next to it as `<stem>.truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Historical events per window.
    #[arg(long, default_value_t = 20)]
    pub lookback: usize,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KmArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// time_of_day, day_of_week, fare, requests, distance_downtown,
    /// distance_airport or threshold:<column>:<value>.
    #[arg(long)]
    pub stratify: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw the curves as `km.svg`.
    #[arg(long)]
    pub svg: bool,
}

/// Model families by their command-line names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    /// Linear Cox model on the target covariates, Newton-Raphson.
    Coxph,
    /// Linear Cox model with a per-driver log-frailty.
    FrailtyCoxph,
    /// Feed-forward network on the target covariates.
    Deepsurv,
    /// Causal transformer over the window.
    TransformerCox,
    /// Causal transformer with a per-driver frailty embedding.
    Fact,
}

impl ModelArg {
    pub fn kind(self) -> ModelKind {
        match self {
            ModelArg::Coxph => ModelKind::Linear,
            ModelArg::FrailtyCoxph => ModelKind::FrailtyLinear,
            ModelArg::Deepsurv => ModelKind::Mlp,
            ModelArg::TransformerCox => ModelKind::Transformer,
            ModelArg::Fact => ModelKind::Fact,
        }
    }

    pub fn solver(self) -> Solver {
        if self == ModelArg::Coxph {
            Solver::Newton
        } else {
            Solver::Adam
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Directory written by `prep`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (TOML); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Lists of sizes to try (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Base training config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Encoder layer, 0-based; the last layer when absent.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Output CSV; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}
