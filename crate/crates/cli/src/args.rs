use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use dpreg::features::FeatureKind;
use dpreg::pipeline::Selector;

#[derive(Debug, Parser)]
#[command(name = "dpreg", version, about = "Deformable 3D registration driven by sparse point sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded dataset of synthetic phantom pairs.
    Synth(SynthArgs),
    /// Register one moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Train the learnable stages end to end on a dataset.
    Train(TrainArgs),
    /// Register every pair of a dataset and aggregate the metrics.
    Eval(EvalArgs),
    /// Compare predicted point sets of pairs sharing a fixed image.
    #[command(name = "w2-study")]
    W2Study(W2Args),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Features {
    Intensity,
    Mind,
    Learned,
}

impl From<Features> for FeatureKind {
    fn from(f: Features) -> Self {
        match f {
            Features::Intensity => FeatureKind::Intensity,
            Features::Mind => FeatureKind::Mind,
            Features::Learned => FeatureKind::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Points {
    Grid,
    Foerstner,
    Predicted,
}

impl From<Points> for Selector {
    fn from(p: Points) -> Self {
        match p {
            Points::Grid => Selector::Grid,
            Points::Foerstner => Selector::Foerstner,
            Points::Predicted => Selector::Predicted,
        }
    }
}

/// Configuration document plus the overrides applied on top of it.
#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Registration configuration JSON [default: built-in defaults]
    #[arg(long, value_name = "C.json")]
    pub config: Option<PathBuf>,
    /// Dense feature extractor (overrides the config)
    #[arg(long, value_enum)]
    pub features: Option<Features>,
    /// Driving point selector (overrides the config)
    #[arg(long, value_enum)]
    pub selector: Option<Points>,
    /// MRF pairwise weight (overrides the config)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Bending-energy weight of the training loss (overrides the config)
    #[arg(long)]
    pub lambda_reg: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Synthetic spec JSON [default: built-in defaults]
    #[arg(long, value_name = "SPEC.json")]
    pub spec: Option<PathBuf>,
    /// Number of pairs
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed (overrides the spec)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct RegisterArgs {
    /// Fixed volume (VOL3)
    #[arg(long, value_name = "F.vol3")]
    pub fixed: PathBuf,
    /// Moving volume (VOL3)
    #[arg(long, value_name = "M.vol3")]
    pub moving: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained parameters (PRM1), needed by learned features and predicted points
    #[arg(long, value_name = "P.prm")]
    pub params: Option<PathBuf>,
    /// Dense displacement field output (VOL3, 3 channels)
    #[arg(long, value_name = "f.vol3")]
    pub out_field: Option<PathBuf>,
    /// Driving points output (CSV)
    #[arg(long, value_name = "p.csv")]
    pub out_points: Option<PathBuf>,
    /// Metrics report output (JSON); needs both label volumes
    #[arg(long, value_name = "m.json", requires_all = ["fixed_labels", "moving_labels"])]
    pub out_metrics: Option<PathBuf>,
    /// Fixed label volume (LAB3)
    #[arg(long, value_name = "F.lab3", requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    /// Moving label volume (LAB3)
    #[arg(long, value_name = "M.lab3", requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    /// Write every stage output (features, points, potentials, marginals,
    /// sparse and dense displacements, effective config) to this directory
    #[arg(long, value_name = "DIR")]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Dataset directory of pairNNN subdirectories
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint output (PRM1)
    #[arg(long, value_name = "P.prm")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Initialization and shuffling seed (overrides the config)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-step loss output (CSV with header `step,loss`)
    #[arg(long, value_name = "trace.csv")]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Dataset directory of pairNNN subdirectories
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained parameters (PRM1)
    #[arg(long, value_name = "P.prm")]
    pub params: Option<PathBuf>,
    /// Report output (JSON)
    #[arg(long, value_name = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct W2Args {
    /// Dataset directory of pairNNN subdirectories
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Trained parameters (PRM1)
    #[arg(long, value_name = "P.prm")]
    pub params: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Report output (JSON)
    #[arg(long, value_name = "w2.json")]
    pub out: PathBuf,
}
