use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Entropy-guided graph pruning and label-limited transfer for traffic forecasting.
///
/// Every subcommand accepts `--config FILE`: `key = value` lines whose keys are
/// long flag names. Explicit flags win over the file.
#[derive(Debug, Parser)]
#[command(name = "prunecast", version, args_override_self = true, arg_required_else_help = true)]
pub struct Cli {
    /// `key = value` defaults merged under the explicit flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Log more to stderr; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a core/boundary network with signals and node labels.
    Synth(SynthArgs),
    /// Prune outer-layer nodes by entropy-weighted correlation.
    Prune(PruneArgs),
    /// Train a forecaster from scratch.
    Train(TrainArgs),
    /// Score a checkpoint and the historical average on the test split.
    Eval(EvalArgs),
    /// Fine-tune a pretrained checkpoint on a label-limited target network.
    Finetune(FinetuneArgs),
    /// Norm-based capacity and generalization-gap report for a checkpoint.
    Audit(AuditArgs),
    /// Pruned vs unpruned transfer benchmark on synthetic data.
    Bench(BenchArgs),
}

/// Signals CSV: a header row of node ids, then one row of readings per time step.
/// Adjacency CSV: either `src,dst,weight` edge rows or an N x N numeric grid
/// (optionally headed by node ids) in signal column order.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "CSV")]
    pub signals: PathBuf,

    /// Minutes between consecutive signal rows.
    #[arg(long, default_value_t = 5.0)]
    pub interval: f64,
}

#[derive(Debug, Args)]
pub struct PruneFlags {
    /// Equal-width histogram bins for node entropy.
    #[arg(long, default_value_t = 16)]
    pub bins: usize,

    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,

    /// Keep edges scoring at least this value.
    #[arg(long, conflicts_with_all = ["quantile", "top_k"])]
    pub tau: Option<f64>,

    /// Threshold at this nearest-rank quantile of positive edge scores (default 0.5).
    #[arg(long, conflicts_with = "top_k")]
    pub quantile: Option<f64>,

    /// Keep each node's k best-scoring out-edges.
    #[arg(long)]
    pub top_k: Option<usize>,

    /// Nodes with thresholded degree at most this are outer-layer.
    #[arg(long, default_value_t = 1)]
    pub d_min: usize,

    /// Peel rounds.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,

    /// Channel width of every block.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,

    #[arg(long, default_value_t = 16)]
    pub head_channels: usize,

    /// Temporal kernel width.
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,

    /// Input window length in steps.
    #[arg(long, default_value_t = 12)]
    pub history: usize,

    #[arg(long, default_value_t = 15.0)]
    pub horizon_minutes: f64,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub n_core: Option<usize>,
    #[arg(long)]
    pub n_boundary: Option<usize>,
    #[arg(long)]
    pub core_edge_prob: Option<f64>,
    #[arg(long)]
    pub attachment_degree: Option<usize>,
    #[arg(long)]
    pub boundary_edge_weight: Option<f64>,
    #[arg(long)]
    pub diffusion: Option<f64>,
    #[arg(long)]
    pub retention: Option<f64>,
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long)]
    pub drive_amplitude: Option<f64>,
    #[arg(long)]
    pub boundary_noise: Option<f64>,
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub interval: Option<f64>,
}

/// Writes `pruned_adjacency.csv`, `kept_nodes.txt` and `peel_report.json`.
/// Scores use the training split only, as fixed by `--history` and `--horizon-minutes`.
#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long, value_name = "CSV")]
    pub adjacency: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub prune: PruneFlags,
    #[arg(long, default_value_t = 12)]
    pub history: usize,
    #[arg(long, default_value_t = 15.0)]
    pub horizon_minutes: f64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "CSV")]
    pub adjacency: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Restrict to these node ids, one per line.
    #[arg(long, value_name = "TXT")]
    pub kept_nodes: Option<PathBuf>,
    /// Prune in-process with the default rule before training.
    #[arg(long)]
    pub prune: bool,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_name = "FILE")]
    pub out_ckpt: PathBuf,
    /// `epoch,train_loss,val_loss` rows.
    #[arg(long, value_name = "CSV")]
    pub loss_csv: Option<PathBuf>,
    /// Test metrics of the trained model.
    #[arg(long, value_name = "JSON")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// `node,mae,rmse,mape` rows.
    #[arg(long, value_name = "CSV")]
    pub per_node: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_name = "FILE")]
    pub source_ckpt: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub adjacency: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Fraction of target training windows with labels, in (0, 1].
    #[arg(long)]
    pub ts_ratio: f64,
    /// Skip target pruning.
    #[arg(long)]
    pub no_prune: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_name = "FILE")]
    pub out_ckpt: PathBuf,
    #[arg(long, value_name = "JSON")]
    pub report: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Signals CSV; samples are the first `m` training windows.
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub interval: f64,
    /// Sample count; defaults to every training window.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, value_name = "JSON")]
    pub out_json: PathBuf,
    /// Per-layer `name,lambda,feature_bound,rad_bound,...` rows.
    #[arg(long, value_name = "CSV")]
    pub out_csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Summary table, one row per (ratio, variant).
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Every per-seed record.
    #[arg(long, value_name = "JSON")]
    pub records: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.10,0.15,0.25")]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
}
