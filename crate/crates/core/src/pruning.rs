//! Graph pruning: node entropy from binned series, absolute Pearson
//! correlation per edge, entropy-weighted edge scores, score thresholding and
//! iterative removal of low-support outer-layer nodes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SignalMatrix;
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;

/// How the score threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Keep edges with `s >= tau`.
    Absolute { tau: f64 },
    /// `tau` is the empirical q-quantile (nearest rank) of the positive scores.
    Quantile { q: f64 },
    /// Keep each node's `k` highest-scoring out-edges.
    TopK { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub bins: usize,
    pub epsilon: f64,
    pub threshold: ThresholdMode,
    pub d_min: usize,
    pub peel_layers: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            bins: 16,
            epsilon: 1e-8,
            threshold: ThresholdMode::Quantile { q: 0.5 },
            d_min: 1,
            peel_layers: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("bins = {} (need >= 2)", self.bins)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon = {} (need > 0)", self.epsilon)));
        }
        match self.threshold {
            ThresholdMode::Quantile { q } if !(q > 0.0 && q < 1.0) => {
                Err(Error::Config(format!("quantile q = {q} outside (0, 1)")))
            }
            ThresholdMode::TopK { k: 0 } => Err(Error::Config("top-k needs k >= 1".into())),
            ThresholdMode::Absolute { tau } if tau.is_nan() => {
                Err(Error::Config("threshold tau is NaN".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Equal-width histogram over `[min, max]`; the maximum falls in the last bin and
/// a constant series puts all mass in bin 0.
pub fn bin_distribution(series: &[f64], bins: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Shape("cannot bin an empty series".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("bins = {bins} (need >= 2)")));
    }
    let (lo, hi) = min_max(series);
    let mut counts = vec![0usize; bins];
    if hi > lo {
        let width = (hi - lo) / bins as f64;
        for &x in series {
            let b = ((x - lo) / width).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
    } else {
        counts[0] = series.len();
    }
    let total = series.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Shannon entropy in nats, `-sum p log(p + eps)`.
pub fn node_entropy(p: &[f64], epsilon: f64) -> Result<f64> {
    if let Some(bad) = p.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Config(format!("invalid probability {bad}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-p.iter().map(|&v| v * (v + epsilon).ln()).sum::<f64>())
}

/// Centered copy of a series and the root of its sum of squares.
/// A constant series is reported with zero spread.
fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let (lo, hi) = min_max(x);
    if lo == hi {
        return (vec![0.0; x.len()], 0.0);
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let d: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    (d, ss)
}

fn pearson_from_centered(dx: &[f64], sx: f64, dy: &[f64], sy: f64, epsilon: f64) -> f64 {
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov: f64 = dx.iter().zip(dy).map(|(a, b)| a * b).sum();
    (cov / (sx * sy + epsilon)).abs()
}

/// Absolute Pearson correlation with `epsilon` added to the denominator.
/// A constant input yields exactly 0.
pub fn abs_pearson(x: &[f64], y: &[f64], epsilon: f64) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!(
            "correlation needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (dx, sx) = centered(x);
    let (dy, sy) = centered(y);
    Ok(pearson_from_centered(&dx, sx, &dy, sy, epsilon))
}

/// Entropy-modulated edge importance for every edge of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScoreMatrix {
    pub scores: Array2<f64>,
    pub entropies: Vec<f64>,
    pub bins_used: usize,
    pub epsilon: f64,
}

fn check_alignment(g: &TrafficGraph, signals: &SignalMatrix) -> Result<()> {
    if signals.n() != g.n() {
        return Err(Error::Shape(format!(
            "{} signal rows for a {}-node graph",
            signals.n(),
            g.n()
        )));
    }
    if signals.node_ids != g.node_ids {
        return Err(Error::Config("signal rows and graph nodes are in different orders".into()));
    }
    Ok(())
}

/// `s_ij = 1[A_ij > 0] * r_ij * (H_i + H_j) / 2`, entropy once per node and
/// correlation once per adjacent pair.
pub fn edge_scores(g: &TrafficGraph, signals: &SignalMatrix, cfg: &PruneConfig) -> Result<EdgeScoreMatrix> {
    cfg.validate()?;
    check_alignment(g, signals)?;
    let n = g.n();
    if signals.t() < 2 {
        return Err(Error::Shape("edge scoring needs at least 2 time steps".into()));
    }
    let rows: Vec<Vec<f64>> = signals.values.rows().into_iter().map(|r| r.to_vec()).collect();
    let entropies = rows
        .iter()
        .map(|r| node_entropy(&bin_distribution(r, cfg.bins)?, cfg.epsilon))
        .collect::<Result<Vec<_>>>()?;
    let centered: Vec<(Vec<f64>, f64)> = rows.iter().map(|r| centered(r)).collect();
    let a = &g.adjacency;
    let mut scores = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if a[[i, j]] <= 0.0 && a[[j, i]] <= 0.0 {
                continue;
            }
            let r = pearson_from_centered(
                &centered[i].0,
                centered[i].1,
                &centered[j].0,
                centered[j].1,
                cfg.epsilon,
            );
            // Adding 0.0 turns a -0.0 product into +0.0 so that ties sort together.
            let s = r * 0.5 * (entropies[i] + entropies[j]) + 0.0;
            if a[[i, j]] > 0.0 {
                scores[[i, j]] = s;
            }
            if a[[j, i]] > 0.0 {
                scores[[j, i]] = s;
            }
        }
    }
    Ok(EdgeScoreMatrix {
        scores,
        entropies,
        bins_used: cfg.bins,
        epsilon: cfg.epsilon,
    })
}

/// Binary pruned adjacency and the score threshold that produced it
/// (`None` for top-k selection).
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholded {
    pub mask: Array2<f64>,
    pub tau: Option<f64>,
}

/// Nearest-rank q-quantile of a non-empty list.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Keeps an edge only where the original graph has one and the score criterion holds.
pub fn threshold_adjacency(s: &EdgeScoreMatrix, g: &TrafficGraph, cfg: &PruneConfig) -> Result<Thresholded> {
    let n = g.n();
    if s.scores.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "score matrix {:?} for a {n}-node graph",
            s.scores.dim()
        )));
    }
    let a = &g.adjacency;
    let mut mask = Array2::zeros((n, n));
    let by_tau = |tau: f64, mask: &mut Array2<f64>| {
        for ((i, j), m) in mask.indexed_iter_mut() {
            if a[[i, j]] > 0.0 && s.scores[[i, j]] >= tau {
                *m = 1.0;
            }
        }
    };
    let tau = match cfg.threshold {
        ThresholdMode::Absolute { tau } => {
            by_tau(tau, &mut mask);
            Some(tau)
        }
        ThresholdMode::Quantile { q } => {
            let positive: Vec<f64> = s
                .scores
                .indexed_iter()
                .filter(|(ij, &v)| a[*ij] > 0.0 && v > 0.0)
                .map(|(_, &v)| v)
                .collect();
            if positive.is_empty() {
                return Err(Error::PruneDegenerate {
                    layer: 0,
                    message: "no positive edge scores to take a quantile of".into(),
                });
            }
            let tau = nearest_rank_quantile(&positive, q);
            by_tau(tau, &mut mask);
            Some(tau)
        }
        ThresholdMode::TopK { k } => {
            for i in 0..n {
                let mut cand: Vec<usize> = (0..n).filter(|&j| a[[i, j]] > 0.0).collect();
                cand.sort_by(|&x, &y| s.scores[[i, y]].total_cmp(&s.scores[[i, x]]).then(x.cmp(&y)));
                for &j in cand.iter().take(k) {
                    mask[[i, j]] = 1.0;
                }
            }
            if g.is_symmetric() {
                for i in 0..n {
                    for j in i + 1..n {
                        if mask[[i, j]] > 0.0 || mask[[j, i]] > 0.0 {
                            mask[[i, j]] = 1.0;
                            mask[[j, i]] = 1.0;
                        }
                    }
                }
            }
            None
        }
    };
    Ok(Thresholded { mask, tau })
}

/// Nodes whose degree in the pruned mask is at most `d_min`.
pub fn outer_layer_nodes(mask: &Array2<f64>, d_min: usize) -> Vec<usize> {
    mask.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().filter(|&&v| v > 0.0).count() <= d_min)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeelLayer {
    /// Indices into the original graph.
    pub removed: Vec<usize>,
    pub threshold_used: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedContext {
    /// Strictly increasing indices into the original graph.
    pub kept_nodes: Vec<usize>,
    /// `|keep| x |keep|`, original weights on surviving edges.
    pub pruned_adjacency: Array2<f64>,
    pub peel_history: Vec<PeelLayer>,
    /// Scores over the full input graph.
    pub score_matrix: EdgeScoreMatrix,
}

impl PrunedContext {
    pub fn pruned_graph(&self, original: &TrafficGraph) -> TrafficGraph {
        TrafficGraph {
            adjacency: self.pruned_adjacency.clone(),
            node_ids: self.kept_nodes.iter().map(|&i| original.node_ids[i].clone()).collect(),
        }
    }

    pub fn removed_count(&self) -> usize {
        self.peel_history.iter().map(|l| l.removed.len()).sum()
    }
}

/// Peels up to `cfg.peel_layers` outer rings. Each layer rescores the induced
/// subgraph of the nodes still present; peeling stops early once a layer
/// finds no outer nodes.
pub fn peel(g: &TrafficGraph, signals: &SignalMatrix, cfg: &PruneConfig) -> Result<PrunedContext> {
    cfg.validate()?;
    check_alignment(g, signals)?;
    let score_matrix = edge_scores(g, signals, cfg)?;
    let mut current: Vec<usize> = (0..g.n()).collect();
    let mut history = Vec::new();
    let mut last_mask: Option<Array2<f64>> = None;

    for layer in 1..=cfg.peel_layers {
        let sub = g.induced(&current);
        let sig = signals.select_nodes(&current);
        let scores = if layer == 1 {
            score_matrix.clone()
        } else {
            edge_scores(&sub, &sig, cfg)?
        };
        let th = threshold_adjacency(&scores, &sub, cfg).map_err(|e| match e {
            Error::PruneDegenerate { message, .. } => Error::PruneDegenerate { layer, message },
            other => other,
        })?;
        let outer = outer_layer_nodes(&th.mask, cfg.d_min);
        if outer.is_empty() {
            last_mask = Some(th.mask);
            break;
        }
        if outer.len() == current.len() {
            return Err(Error::PruneDegenerate {
                layer,
                message: format!("all {} remaining nodes are outer-layer nodes", current.len()),
            });
        }
        let survivors: Vec<usize> = (0..current.len()).filter(|i| !outer.contains(i)).collect();
        last_mask = Some(Array2::from_shape_fn((survivors.len(), survivors.len()), |(a, b)| {
            th.mask[[survivors[a], survivors[b]]]
        }));
        history.push(PeelLayer {
            removed: outer.iter().map(|&i| current[i]).collect(),
            threshold_used: th.tau,
        });
        current = survivors.iter().map(|&i| current[i]).collect();
    }

    let mut pruned_adjacency = g.induced(&current).adjacency;
    if let Some(mask) = last_mask {
        pruned_adjacency *= &mask;
    }
    Ok(PrunedContext {
        kept_nodes: current,
        pruned_adjacency,
        peel_history: history,
        score_matrix,
    })
}

/// Symmetric normalization with self-loops, `D^{-1/2} (A + I) D^{-1/2}`.
pub fn normalize_adjacency(pruned: &Array2<f64>) -> Array2<f64> {
    let n = pruned.nrows();
    let mut m = pruned.clone();
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = m.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| m[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}
