use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "phgr", version, about = "Hyperbolic graph recommender: data prep, training, evaluation and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn an interaction log (or synthetic data) into a split dataset directory
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint plus the training curve
    Train(RunArgs),
    /// Score a checkpoint on a dataset split
    Evaluate(EvaluateArgs),
    /// Train and compare the eight model variants with one seed
    Ablate(RunArgs),
    /// Run the randomised geometry property battery
    VerifyGeometry(VerifyArgs),
    /// Band items by distance from the origin and report interaction counts
    AnalyzeRegions(CheckpointArgs),
    /// Write attention weights for chosen sequences as CSV
    ExportAttention(AttentionArgs),
    /// Sweep dimension, depth and ω and report every run
    Grid(GridArgs),
}

/// Settings shared by every subcommand. Each flag mirrors the config-file
/// key of the same name (dashes for underscores) and overrides it.
#[derive(Debug, Args, Default)]
pub struct Common {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Random seed
    #[arg(long)]
    pub seed: Option<String>,
    /// Worker threads, 0 for all cores
    #[arg(long)]
    pub threads: Option<String>,
    /// Geometry: phgr (Poincaré ball) or ehgr (Euclidean)
    #[arg(long)]
    pub variant: Option<String>,
    /// Scoring inner product: D (geodesic) or P (projected)
    #[arg(long)]
    pub inner: Option<String>,
    /// Drop the global user-item graph
    #[arg(long)]
    pub no_global: bool,
    /// Drop the per-sequence item graph
    #[arg(long)]
    pub no_local: bool,
    /// Drop long-view attention
    #[arg(long)]
    pub no_long: bool,
    /// Drop short-view attention
    #[arg(long)]
    pub no_short: bool,
    /// Ranking cutoffs, comma-separated
    #[arg(long, value_name = "K,K..")]
    pub k: Option<String>,
    /// Embedding dimension
    #[arg(long)]
    pub dim: Option<String>,
    /// Graph attention layers
    #[arg(long)]
    pub layers: Option<String>,
    /// Ball curvature c
    #[arg(long)]
    pub curvature: Option<String>,
    /// Global layer-mix weights, comma-separated
    #[arg(long)]
    pub alpha: Option<String>,
    /// Local layer-mix weights, comma-separated
    #[arg(long)]
    pub zeta: Option<String>,
    /// Embedding initialisation standard deviation
    #[arg(long)]
    pub init_std: Option<String>,
    /// Distance kept from the ball boundary
    #[arg(long)]
    pub boundary_eps: Option<String>,
    /// Scale attention logits by edge weights
    #[arg(long)]
    pub edge_weighted_attention: bool,
    /// Optimizer step size
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// Sequences per batch
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Weight of the contrastive ranking loss
    #[arg(long)]
    pub omega: Option<String>,
    /// Contrastive hinge margin
    #[arg(long)]
    pub margin: Option<String>,
    /// Early-stopping patience in epochs
    #[arg(long)]
    pub patience: Option<String>,
    /// Epoch limit
    #[arg(long)]
    pub max_epochs: Option<String>,
    /// Negative items per positive
    #[arg(long)]
    pub negatives: Option<String>,
    /// Shortest sequence kept by `prepare`
    #[arg(long)]
    pub min_len: Option<String>,
    /// Malformed input lines tolerated by `prepare`
    #[arg(long)]
    pub max_malformed: Option<String>,
}

impl Common {
    /// Flag overrides as config `(key, value)` pairs.
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut opt = |k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        };
        opt("data", &self.data);
        opt("out", &self.out);
        opt("seed", &self.seed);
        opt("threads", &self.threads);
        opt("variant", &self.variant);
        opt("inner", &self.inner);
        opt("k", &self.k);
        opt("dim", &self.dim);
        opt("layers", &self.layers);
        opt("curvature", &self.curvature);
        opt("alpha", &self.alpha);
        opt("zeta", &self.zeta);
        opt("init_std", &self.init_std);
        opt("boundary_eps", &self.boundary_eps);
        opt("learning_rate", &self.learning_rate);
        opt("batch_size", &self.batch_size);
        opt("omega", &self.omega);
        opt("margin", &self.margin);
        opt("patience", &self.patience);
        opt("max_epochs", &self.max_epochs);
        opt("negatives", &self.negatives);
        opt("min_len", &self.min_len);
        opt("max_malformed", &self.max_malformed);
        for (k, on) in [
            ("no_global", self.no_global),
            ("no_local", self.no_local),
            ("no_long", self.no_long),
            ("no_short", self.no_short),
            ("edge_weighted_attention", self.edge_weighted_attention),
        ] {
            if on {
                out.push((k, "true".into()));
            }
        }
        out
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tab-separated `user item timestamp` log
    #[arg(long, value_name = "FILE", conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate long-tailed synthetic data instead of reading a log
    #[arg(long)]
    pub synthetic: bool,
    /// Synthetic users
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    /// Synthetic items
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    /// Synthetic popularity exponent (> 1)
    #[arg(long, default_value_t = 2.0)]
    pub exponent: f64,
    /// Shortest synthetic sequence
    #[arg(long, default_value_t = 5)]
    pub len_min: usize,
    /// Longest synthetic sequence
    #[arg(long, default_value_t = 15)]
    pub len_max: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Which part to score
    #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// User ids whose sequences to export, comma-separated
    #[arg(long, value_name = "ID,ID..", value_delimiter = ',', required = true)]
    pub users: Vec<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Random pairs per dimension
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Curvature
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    /// Dimensions to test, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "2,8,64")]
    pub dims: Vec<usize>,
    /// Largest point norm, in units of the ball radius
    #[arg(long, default_value_t = 0.98)]
    pub max_norm: f64,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dimensions to sweep
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    pub dims: Vec<usize>,
    /// Depths to sweep
    #[arg(long = "depths", value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub depths: Vec<usize>,
    /// ω values to sweep
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01,0.1,1")]
    pub omegas: Vec<f64>,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Prepare(a) => &a.common,
            Command::Train(a) | Command::Ablate(a) => &a.common,
            Command::Evaluate(a) => &a.common,
            Command::VerifyGeometry(a) => &a.common,
            Command::AnalyzeRegions(a) => &a.common,
            Command::ExportAttention(a) => &a.common,
            Command::Grid(a) => &a.common,
        }
    }
}
