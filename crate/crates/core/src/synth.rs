//! Synthetic road networks with a known core/boundary partition, and the
//! source-to-target transfer benchmark built on them.
//!
//! Core nodes share a daily periodic drive. Boundary nodes hang off the core
//! through weak edges and receive independent exogenous noise, which partly
//! diffuses into the core. Signals follow
//!
//! ```text
//! z(t+1) = ρ·[(1−α)·z(t) + α·RowNorm(A)·z(t)] + g·d·sin(2πt/P)·1_core + σ·ε(t)·1_boundary
//! x(t)   = baseline + z(t)
//! ```
//!
//! where `g = |1 − ρ·e^{2πi/P}|` scales the drive so that the core's
//! steady-state periodic response has amplitude `d`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::SignalMatrix;
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::model::ModelConfig;
use crate::pruning::PruneConfig;
use crate::train::TrainConfig;
use crate::transfer::{finetune, pretrain, PipelineConfig, TransferConfig};

pub const BURN_IN: usize = 100;
const CONNECT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLabel {
    Core,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_core: usize,
    pub n_boundary: usize,
    pub core_edge_prob: f64,
    pub attachment_degree: usize,
    /// Weight of each boundary-core edge; core-core edges weigh 1.
    pub boundary_edge_weight: f64,
    /// α, the share of each step taken from neighbours.
    pub diffusion: f64,
    /// ρ, applied to the whole diffusion step.
    pub retention: f64,
    pub period: usize,
    /// Steady-state amplitude of the core's periodic response.
    pub drive_amplitude: f64,
    /// Per-step standard deviation of boundary forcing.
    pub boundary_noise: f64,
    pub baseline: f64,
    pub time_steps: usize,
    pub sampling_interval_minutes: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_core: 30,
            n_boundary: 10,
            core_edge_prob: 0.6,
            attachment_degree: 2,
            boundary_edge_weight: 0.1,
            diffusion: 0.3,
            retention: 0.98,
            period: 288,
            drive_amplitude: 10.0,
            boundary_noise: 20.0,
            baseline: 60.0,
            time_steps: 2000,
            sampling_interval_minutes: 5.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_core == 0 {
            return bad("n_core must be at least 1".into());
        }
        if !(self.core_edge_prob > 0.0 && self.core_edge_prob <= 1.0) {
            return bad(format!("core edge probability {} must be in (0, 1]", self.core_edge_prob));
        }
        if self.n_boundary > 0 && !(1..=self.n_core).contains(&self.attachment_degree) {
            return bad(format!(
                "attachment degree {} must be in 1..={}",
                self.attachment_degree, self.n_core
            ));
        }
        if !(self.diffusion >= 0.0 && self.diffusion < 1.0) {
            return bad(format!("diffusion {} must be in [0, 1)", self.diffusion));
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return bad(format!("retention {} must be in (0, 1]", self.retention));
        }
        if self.period == 0 || self.time_steps == 0 {
            return bad("period and time steps must be positive".into());
        }
        let nonneg = [
            self.boundary_edge_weight,
            self.drive_amplitude,
            self.boundary_noise,
            self.sampling_interval_minutes,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.boundary_edge_weight == 0.0 {
            return bad("weights, amplitudes and interval must be finite; edge weight positive".into());
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n_core + self.n_boundary
    }
}

fn connected(a: &Array2<f64>, n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if a[[i, j]] > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Core nodes come first (`c00`, `c01`, ...), then boundary nodes (`b00`, ...).
pub fn gen_network(cfg: &SynthConfig) -> Result<(TrafficGraph, Vec<NodeLabel>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (nc, nb) = (cfg.n_core, cfg.n_boundary);
    let n = nc + nb;
    let mut a = Array2::zeros((n, n));
    let mut ok = false;
    for _ in 0..CONNECT_ATTEMPTS {
        a.fill(0.0);
        for i in 0..nc {
            for j in i + 1..nc {
                if rng.random::<f64>() < cfg.core_edge_prob {
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                }
            }
        }
        if connected(&a, nc) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Config(format!(
            "no connected core with {nc} nodes and edge probability {} in {CONNECT_ATTEMPTS} attempts",
            cfg.core_edge_prob
        )));
    }
    for b in nc..n {
        for c in sample(&mut rng, nc, cfg.attachment_degree) {
            a[[b, c]] = cfg.boundary_edge_weight;
            a[[c, b]] = cfg.boundary_edge_weight;
        }
    }
    let width = 2.max(n.to_string().len());
    let ids = (0..n)
        .map(|i| {
            if i < nc {
                format!("c{i:0width$}")
            } else {
                format!("b{:0width$}", i - nc)
            }
        })
        .collect();
    let labels = (0..n)
        .map(|i| if i < nc { NodeLabel::Core } else { NodeLabel::Boundary })
        .collect();
    Ok((TrafficGraph::new(a, ids)?, labels))
}

/// Simulates the diffusion process; the first [`BURN_IN`] steps are discarded.
pub fn gen_signals(graph: &TrafficGraph, labels: &[NodeLabel], cfg: &SynthConfig) -> Result<SignalMatrix> {
    cfg.validate()?;
    let n = graph.n();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
    }
    let mut p = graph.adjacency.clone();
    for mut row in p.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    let omega = 2.0 * PI / cfg.period as f64;
    let rho = cfg.retention;
    let gain = ((1.0 - rho * omega.cos()).powi(2) + (rho * omega.sin()).powi(2)).sqrt();
    let core: Array1<f64> = labels.iter().map(|l| f64::from(*l == NodeLabel::Core)).collect();
    let boundary = core.mapv(|c| 1.0 - c);

    // Noise stream is separate from the topology stream so it does not depend on graph sampling.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut z = Array1::<f64>::zeros(n);
    let mut out = Array2::zeros((n, cfg.time_steps));
    for t in 0..BURN_IN + cfg.time_steps {
        if t >= BURN_IN {
            out.column_mut(t - BURN_IN).assign(&z.mapv(|v| v + cfg.baseline));
        }
        let mixed = (1.0 - cfg.diffusion) * &z + cfg.diffusion * p.dot(&z);
        let drive = gain * cfg.drive_amplitude * (omega * t as f64).sin();
        let noise: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        z = rho * mixed + drive * &core + cfg.boundary_noise * (&noise * &boundary);
    }
    SignalMatrix::new(out, cfg.sampling_interval_minutes, graph.node_ids.clone())
}

/// Generated graph, labels and signals for one domain.
#[derive(Debug, Clone)]
pub struct SynthDomain {
    pub graph: TrafficGraph,
    pub labels: Vec<NodeLabel>,
    pub signals: SignalMatrix,
}

pub fn gen_domain(cfg: &SynthConfig) -> Result<SynthDomain> {
    let (graph, labels) = gen_network(cfg)?;
    let signals = gen_signals(&graph, &labels, cfg)?;
    Ok(SynthDomain { graph, labels, signals })
}

/// `node_id,label` lines.
pub fn labels_csv(graph: &TrafficGraph, labels: &[NodeLabel]) -> String {
    let mut s = String::from("node_id,label\n");
    for (id, l) in graph.node_ids.iter().zip(labels) {
        let name = match l {
            NodeLabel::Core => "core",
            NodeLabel::Boundary => "boundary",
        };
        let _ = writeln!(s, "{id},{name}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub boundary_removed: usize,
    pub boundary_total: usize,
    pub core_removed: usize,
    pub core_total: usize,
}

impl Recovery {
    pub fn from_kept(node_ids: &[String], labels: &[NodeLabel], kept_ids: &[String]) -> Self {
        let mut r = Recovery {
            boundary_removed: 0,
            boundary_total: 0,
            core_removed: 0,
            core_total: 0,
        };
        for (id, l) in node_ids.iter().zip(labels) {
            let removed = !kept_ids.contains(id);
            match l {
                NodeLabel::Core => {
                    r.core_total += 1;
                    r.core_removed += usize::from(removed);
                }
                NodeLabel::Boundary => {
                    r.boundary_total += 1;
                    r.boundary_removed += usize::from(removed);
                }
            }
        }
        r
    }

    /// Share of boundary nodes removed; 1 when there are none.
    pub fn boundary_rate(&self) -> f64 {
        if self.boundary_total == 0 {
            1.0
        } else {
            self.boundary_removed as f64 / self.boundary_total as f64
        }
    }

    pub fn core_rate(&self) -> f64 {
        if self.core_total == 0 {
            0.0
        } else {
            self.core_removed as f64 / self.core_total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Pruned,
    Unpruned,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Pruned => "pruned",
            Variant::Unpruned => "unpruned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub source: SynthConfig,
    pub target: SynthConfig,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub prune: PruneConfig,
    pub horizon_minutes: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut model = ModelConfig::uniform(2, 8, 3, 12, 3);
        model.head_channels = 8;
        let pretrain = TrainConfig {
            batch_size: 32,
            lr: 3e-3,
            max_epochs: 6,
            patience: 3,
            ..TrainConfig::default()
        };
        BenchConfig {
            source: SynthConfig::default(),
            target: SynthConfig {
                n_core: 24,
                n_boundary: 8,
                seed: 1042,
                ..SynthConfig::default()
            },
            ratios: vec![0.05, 0.10, 0.15, 0.25],
            seeds: (0..5).collect(),
            model,
            finetune: TrainConfig {
                max_epochs: 8,
                ..pretrain
            },
            pretrain,
            prune: PruneConfig::default(),
            horizon_minutes: 15.0,
        }
    }
}

/// One fine-tuned cell of the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub seed: u64,
    pub variant: Variant,
    pub ratio: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub ha_mae: f64,
    pub kept_nodes: usize,
    pub train_windows: usize,
    pub recovery: Recovery,
}

/// Source pretraining result for one (seed, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub seed: u64,
    pub variant: Variant,
    pub mae: f64,
    pub ha_mae: f64,
    pub kept_nodes: usize,
    pub recovery: Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ratio: f64,
    pub variant: Variant,
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape_mean: f64,
    pub mape_std: f64,
    pub ha_mae_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub pretrain: Vec<PretrainRecord>,
    pub records: Vec<BenchRecord>,
    pub summary: Vec<SummaryRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl BenchTable {
    pub fn row(&self, ratio: f64, variant: Variant) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.variant == variant && (r.ratio - ratio).abs() < 1e-12)
    }

    /// `ratio,variant,runs,mae_mean,mae_std,rmse_mean,rmse_std,mape_mean,mape_std,ha_mae_mean`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("ratio,variant,runs,mae_mean,mae_std,rmse_mean,rmse_std,mape_mean,mape_std,ha_mae_mean\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.ratio,
                r.variant.name(),
                r.runs,
                r.mae_mean,
                r.mae_std,
                r.rmse_mean,
                r.rmse_std,
                r.mape_mean,
                r.mape_std,
                r.ha_mae_mean
            );
        }
        s
    }
}

fn summarize(records: &[BenchRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u64, Variant), Vec<&BenchRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.ratio.to_bits(), r.variant)).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((ratio, variant), rs)| {
            let col = |f: fn(&BenchRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (mae_mean, mae_std) = mean_std(&col(|r| r.mae));
            let (rmse_mean, rmse_std) = mean_std(&col(|r| r.rmse));
            let (mape_mean, mape_std) = mean_std(&col(|r| r.mape));
            SummaryRow {
                ratio: f64::from_bits(ratio),
                variant,
                runs: rs.len(),
                mae_mean,
                mae_std,
                rmse_mean,
                rmse_std,
                mape_mean,
                mape_std,
                ha_mae_mean: mean_std(&col(|r| r.ha_mae)).0,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.variant.cmp(&b.variant)));
    rows
}

type Job = (PretrainRecord, Vec<BenchRecord>);

fn run_job(cfg: &BenchConfig, seed: u64, variant: Variant) -> Result<Job> {
    let source_cfg = SynthConfig {
        seed: cfg.source.seed.wrapping_add(seed),
        ..cfg.source.clone()
    };
    let target_cfg = SynthConfig {
        seed: cfg.target.seed.wrapping_add(seed),
        ..cfg.target.clone()
    };
    let source = gen_domain(&source_cfg)?;
    let target = gen_domain(&target_cfg)?;
    let prune = (variant == Variant::Pruned).then_some(cfg.prune);
    let pipeline = PipelineConfig {
        model: cfg.model.clone(),
        train: TrainConfig { seed, ..cfg.pretrain },
        prune,
        horizon_minutes: cfg.horizon_minutes,
    };
    let pre = pretrain(&source.graph, &source.signals, &pipeline)?;
    let pre_record = PretrainRecord {
        seed,
        variant,
        mae: pre.report.model.mae,
        ha_mae: pre.report.historical_average.mae,
        kept_nodes: pre.report.nodes,
        recovery: Recovery::from_kept(&source.graph.node_ids, &source.labels, &pre.checkpoint.header.kept_nodes),
    };
    log::info!(
        "seed {seed} {}: source MAE {:.4} (HA {:.4})",
        variant.name(),
        pre_record.mae,
        pre_record.ha_mae
    );
    let records = cfg
        .ratios
        .iter()
        .map(|&ratio| {
            let tc = TransferConfig {
                ts_ratio: ratio,
                prune,
                train: TrainConfig { seed, ..cfg.finetune },
            };
            let out = finetune(&pre.checkpoint, &target.graph, &target.signals, &tc)?;
            Ok(record(seed, variant, &target, &out.checkpoint, out.report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pre_record, records))
}

fn record(seed: u64, variant: Variant, target: &SynthDomain, ck: &Checkpoint, r: crate::transfer::TransferReport) -> BenchRecord {
    BenchRecord {
        seed,
        variant,
        ratio: r.ratio,
        mae: r.mae,
        rmse: r.rmse,
        mape: r.mape,
        ha_mae: r.ha_mae,
        kept_nodes: r.kept_nodes,
        train_windows: r.train_windows,
        recovery: Recovery::from_kept(&target.graph.node_ids, &target.labels, &ck.header.kept_nodes),
    }
}

/// Every (seed, variant) pipeline runs as an independent job: generate both
/// domains, pretrain on the source, fine-tune at every ratio.
pub fn transfer_benchmark(cfg: &BenchConfig) -> Result<BenchTable> {
    if cfg.ratios.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one ratio and one seed".into()));
    }
    let jobs: Vec<(u64, Variant)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| [(s, Variant::Pruned), (s, Variant::Unpruned)])
        .collect();
    let results: Vec<Job> = jobs
        .par_iter()
        .map(|&(seed, variant)| run_job(cfg, seed, variant))
        .collect::<Result<_>>()?;
    let mut pretrain = Vec::new();
    let mut records = Vec::new();
    for (p, rs) in results {
        pretrain.push(p);
        records.extend(rs);
    }
    records.sort_by(|a, b| {
        a.ratio
            .total_cmp(&b.ratio)
            .then(a.seed.cmp(&b.seed))
            .then(a.variant.cmp(&b.variant))
    });
    Ok(BenchTable {
        summary: summarize(&records),
        pretrain,
        records,
    })
}
