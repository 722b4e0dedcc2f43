//! End-to-end pipeline and the source-pretrain / target-finetune protocol.
//!
//! A domain is prepared by splitting its series chronologically, pruning the
//! graph and fitting normalization on the rows the domain is allowed to see,
//! and windowing the normalized series. Source pretraining sees the whole
//! training range; target fine-tuning sees only the prefix covered by its
//! label budget.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    apply_zscore, chronological_split, fit_zscore, horizon_steps, make_windows, reduct, DatasetSplits, NormStats,
    SignalMatrix, SplitRanges, WindowedDataset,
};
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::metrics::{historical_average_baseline, Metrics};
use crate::model::{ModelConfig, ModelParams};
use crate::pruning::{normalize_adjacency, peel, PruneConfig, PrunedContext};
use crate::train::{predict, train, EpochLoss, TrainConfig};

/// Graph, series and windows of one domain after pruning and normalization.
#[derive(Debug, Clone)]
pub struct PreparedDomain {
    pub graph: TrafficGraph,
    pub a_hat: Array2<f64>,
    pub context: Option<PrunedContext>,
    /// Original-unit series of the kept nodes.
    pub raw: SignalMatrix,
    pub stats: NormStats,
    pub ranges: SplitRanges,
    pub splits: DatasetSplits,
}

fn check_aligned(graph: &TrafficGraph, signals: &SignalMatrix) -> Result<()> {
    if graph.node_ids != signals.node_ids {
        return Err(Error::Config(
            "graph and signal node ids differ; load the adjacency against the signals header".into(),
        ));
    }
    Ok(())
}

/// Prunes (optionally) and normalizes using only the columns in `observed`.
pub fn prepare_domain(
    graph: &TrafficGraph,
    signals: &SignalMatrix,
    prune: Option<&PruneConfig>,
    history: usize,
    horizon_minutes: f64,
    observed: Option<Range<usize>>,
) -> Result<PreparedDomain> {
    check_aligned(graph, signals)?;
    let horizon = horizon_steps(horizon_minutes, signals.sampling_interval_minutes)?;
    let ranges = chronological_split(signals.t(), history + horizon)?;
    let observed = observed.unwrap_or_else(|| ranges.train.clone());
    if observed.end > ranges.train.end || observed.is_empty() {
        return Err(Error::Split(format!(
            "observed rows {observed:?} must lie inside the training range {:?}",
            ranges.train
        )));
    }
    let (graph, context, raw) = match prune {
        Some(cfg) => {
            let ctx = peel(graph, &signals.columns(observed.clone()), cfg)?;
            let pruned = ctx.pruned_graph(graph);
            let raw = signals.select_nodes(&ctx.kept_nodes);
            (pruned, Some(ctx), raw)
        }
        None => (graph.clone(), None, signals.clone()),
    };
    let stats = fit_zscore(raw.values.slice(ndarray::s![.., observed]))?;
    let normalized = SignalMatrix {
        values: apply_zscore(&raw.values, &stats)?,
        ..raw.clone()
    };
    let splits = make_windows(&normalized, &ranges, history, horizon_minutes)?;
    Ok(PreparedDomain {
        a_hat: normalize_adjacency(&graph.adjacency),
        graph,
        context,
        raw,
        stats,
        ranges,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: Metrics,
    pub historical_average: Metrics,
    pub test_windows: usize,
    pub nodes: usize,
}

type Forecasts = Vec<Array2<f64>>;

/// Forecasts and truths for a window set, both mapped back to original units.
pub fn forecasts_in_original_units(
    params: &ModelParams,
    a_hat: &Array2<f64>,
    data: &WindowedDataset,
    stats: &NormStats,
) -> Result<(Forecasts, Forecasts)> {
    let preds = predict(params, a_hat, &data.windows)?
        .iter()
        .map(|p| reduct(p, stats))
        .collect::<Result<Vec<_>>>()?;
    let truths = data
        .windows
        .iter()
        .map(|w| reduct(&w.target, stats))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, truths))
}

/// Scores `params` and the historical average on the domain's full test split.
pub fn evaluate_test(params: &ModelParams, domain: &PreparedDomain) -> Result<EvalReport> {
    let test = &domain.splits.test;
    let (preds, truths) = forecasts_in_original_units(params, &domain.a_hat, test, &domain.stats)?;
    let targets: Vec<Range<usize>> = test.windows.iter().map(|w| w.target_range()).collect();
    let ha = historical_average_baseline(
        &domain.raw.values,
        domain.ranges.train.clone(),
        domain.raw.sampling_interval_minutes,
        &targets,
    )?;
    Ok(EvalReport {
        model: Metrics::over_windows(&preds, &truths)?,
        historical_average: Metrics::over_windows(&ha, &truths)?,
        test_windows: test.len(),
        nodes: domain.graph.n(),
    })
}

/// Test-split metrics per node, in the domain's node order.
pub fn per_node_test_metrics(params: &ModelParams, domain: &PreparedDomain) -> Result<Vec<(String, Metrics)>> {
    let (preds, truths) = forecasts_in_original_units(params, &domain.a_hat, &domain.splits.test, &domain.stats)?;
    let per = Metrics::per_node(&preds, &truths)?;
    Ok(domain.graph.node_ids.iter().cloned().zip(per).collect())
}

/// Rebuilds the domain a checkpoint was trained on from `signals`, using the
/// checkpoint's graph and stored normalization instead of refitting.
pub fn checkpoint_domain(ck: &Checkpoint, signals: &SignalMatrix) -> Result<PreparedDomain> {
    if signals.sampling_interval_minutes != ck.header.sampling_interval_minutes {
        return Err(Error::Config(format!(
            "signals sampled every {} min, checkpoint expects {}",
            signals.sampling_interval_minutes, ck.header.sampling_interval_minutes
        )));
    }
    let graph = ck.graph()?;
    let raw = signals.select_ids(&graph.node_ids)?;
    let cfg = &ck.params.config;
    let ranges = chronological_split(raw.t(), cfg.history + cfg.horizon_steps)?;
    let stats = ck.header.norm_stats.clone();
    let normalized = SignalMatrix {
        values: apply_zscore(&raw.values, &stats)?,
        ..raw.clone()
    };
    let splits = make_windows(&normalized, &ranges, cfg.history, ck.header.horizon_minutes)?;
    Ok(PreparedDomain {
        a_hat: normalize_adjacency(&graph.adjacency),
        graph,
        context: None,
        raw,
        stats,
        ranges,
        splits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prune: Option<PruneConfig>,
    pub horizon_minutes: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prune: Some(PruneConfig::default()),
            horizon_minutes: 15.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLoss>,
    pub report: EvalReport,
    pub domain: PreparedDomain,
}

/// Source pretraining: prune, normalize, window, train, evaluate on the source test split.
pub fn pretrain(graph: &TrafficGraph, signals: &SignalMatrix, cfg: &PipelineConfig) -> Result<TrainedModel> {
    let domain = prepare_domain(graph, signals, cfg.prune.as_ref(), cfg.model.history, cfg.horizon_minutes, None)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.horizon_steps = domain.splits.train.horizon;
    model_cfg.n_nodes = domain.graph.n();
    let init = ModelParams::init(&model_cfg, cfg.train.seed)?;
    let outcome = train(init, &domain.a_hat, &domain.splits.train, &domain.splits.val, &cfg.train)?;
    let report = evaluate_test(&outcome.params, &domain)?;
    let checkpoint = Checkpoint::new(
        outcome.params,
        cfg.train,
        cfg.prune,
        domain.stats.clone(),
        &domain.graph,
        signals.sampling_interval_minutes,
        cfg.horizon_minutes,
    );
    Ok(TrainedModel {
        checkpoint,
        history: outcome.history,
        report,
        domain,
    })
}

/// Number of windows kept for a label budget: `ceil(ratio * count)`.
pub fn budget_count(ratio: f64, count: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("T/S ratio {ratio} must be in (0, 1]")));
    }
    // The small offset keeps exact products like 0.05 * 200 from rounding up.
    let k = ((ratio * count as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Err(Error::Split(format!("ratio {ratio} of {count} windows leaves nothing to train on")));
    }
    Ok(k.min(count))
}

/// The chronologically first `ceil(ratio * count)` training windows.
pub fn subset_target(train: &WindowedDataset, ratio: f64) -> Result<WindowedDataset> {
    let k = budget_count(ratio, train.len())?;
    Ok(WindowedDataset {
        windows: train.windows[..k].to_vec(),
        ..train.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub ts_ratio: f64,
    /// Pruning applied to the target; `None` for the unpruned ablation.
    pub prune: Option<PruneConfig>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub ratio: f64,
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
    pub horizon_minutes: f64,
    pub pruned: bool,
    pub kept_nodes: usize,
    pub train_windows: usize,
    pub ha_mae: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLoss>,
    pub report: TransferReport,
}

fn check_compatible(ck: &Checkpoint, target: &SignalMatrix) -> Result<()> {
    let cfg = &ck.params.config;
    let mut problems = Vec::new();
    match horizon_steps(ck.header.horizon_minutes, target.sampling_interval_minutes) {
        Ok(steps) if steps == cfg.horizon_steps => {}
        Ok(steps) => problems.push(format!(
            "horizon: checkpoint emits {} steps, target needs {steps}",
            cfg.horizon_steps
        )),
        Err(e) => problems.push(e.to_string()),
    }
    if let Err(e) = cfg.validate() {
        problems.push(e.to_string());
    }
    let expected = ModelParams::init(cfg, 0)?.manifest();
    for (want, have) in expected.iter().zip(ck.params.manifest()) {
        if want.shape != have.shape {
            problems.push(format!("{}: {:?} vs {:?}", want.name, have.shape, want.shape));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Transfer(problems.join("; ")))
    }
}

/// Fine-tunes every parameter of a pretrained checkpoint on a label-limited target.
pub fn finetune(
    ck: &Checkpoint,
    graph: &TrafficGraph,
    signals: &SignalMatrix,
    cfg: &TransferConfig,
) -> Result<FinetuneOutcome> {
    check_compatible(ck, signals)?;
    let model = &ck.params.config;
    let history = model.history;
    let span = history + model.horizon_steps;
    let ranges = chronological_split(signals.t(), span)?;
    let available = ranges.train.len() + 1 - span;
    let k = budget_count(cfg.ts_ratio, available)?;
    let observed = ranges.train.start..ranges.train.start + k - 1 + span;

    let domain = prepare_domain(
        graph,
        signals,
        cfg.prune.as_ref(),
        history,
        ck.header.horizon_minutes,
        Some(observed),
    )?;
    let subset = subset_target(&domain.splits.train, cfg.ts_ratio)?;
    debug_assert_eq!(subset.len(), k);
    let outcome = train(ck.params.clone(), &domain.a_hat, &subset, &domain.splits.val, &cfg.train)?;
    let eval = evaluate_test(&outcome.params, &domain)?;
    let report = TransferReport {
        ratio: cfg.ts_ratio,
        mae: eval.model.mae,
        mape: eval.model.mape,
        rmse: eval.model.rmse,
        horizon_minutes: ck.header.horizon_minutes,
        pruned: cfg.prune.is_some(),
        kept_nodes: domain.graph.n(),
        train_windows: subset.len(),
        ha_mae: eval.historical_average.mae,
    };
    let mut params = outcome.params;
    params.config.n_nodes = domain.graph.n();
    let checkpoint = Checkpoint::new(
        params,
        cfg.train,
        cfg.prune,
        domain.stats.clone(),
        &domain.graph,
        signals.sampling_interval_minutes,
        ck.header.horizon_minutes,
    );
    Ok(FinetuneOutcome {
        checkpoint,
        history: outcome.history,
        report,
    })
}
