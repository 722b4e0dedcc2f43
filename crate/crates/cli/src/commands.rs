use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use prunecast_core::audit::audit;
use prunecast_core::data::{
    chronological_split, horizon_steps, load_adjacency, load_signals, write_adjacency, write_signals,
};
use prunecast_core::model::ModelConfig;
use prunecast_core::pruning::peel;
use prunecast_core::synth::{gen_domain, labels_csv, transfer_benchmark, BenchConfig, SynthConfig};
use prunecast_core::train::write_loss_csv;
use prunecast_core::transfer::{
    checkpoint_domain, evaluate_test, finetune, per_node_test_metrics, pretrain, PipelineConfig, TransferConfig,
};
use prunecast_core::{
    Checkpoint, Error, PruneConfig, Result, SignalMatrix, Tensor3, ThresholdMode, TrafficGraph, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::args::*;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_pair(adjacency: &Path, data: &DataArgs) -> Result<(TrafficGraph, SignalMatrix)> {
    let signals = load_signals(&data.signals, data.interval)?;
    let graph = load_adjacency(adjacency, &signals.node_ids)?;
    Ok((graph, signals))
}

fn prune_config(f: &PruneFlags) -> Result<PruneConfig> {
    let threshold = match (f.tau, f.quantile, f.top_k) {
        (Some(tau), _, _) => ThresholdMode::Absolute { tau },
        (_, _, Some(k)) => ThresholdMode::TopK { k },
        (_, q, _) => ThresholdMode::Quantile { q: q.unwrap_or(0.5) },
    };
    let cfg = PruneConfig {
        bins: f.bins,
        epsilon: f.epsilon,
        threshold,
        d_min: f.d_min,
        peel_layers: f.layers,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(f: &ModelFlags) -> ModelConfig {
    let mut m = ModelConfig::uniform(f.blocks, f.channels, f.kernel, f.history, 1);
    m.head_channels = f.head_channels;
    m
}

fn train_config(base: TrainConfig, f: &TrainFlags, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: f.batch_size.unwrap_or(base.batch_size),
        lr: f.lr.unwrap_or(base.lr),
        weight_decay: f.weight_decay.unwrap_or(base.weight_decay),
        max_epochs: f.epochs.unwrap_or(base.max_epochs),
        patience: f.patience.unwrap_or(base.patience),
        seed,
    }
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_core: a.n_core.unwrap_or(d.n_core),
        n_boundary: a.n_boundary.unwrap_or(d.n_boundary),
        core_edge_prob: a.core_edge_prob.unwrap_or(d.core_edge_prob),
        attachment_degree: a.attachment_degree.unwrap_or(d.attachment_degree),
        boundary_edge_weight: a.boundary_edge_weight.unwrap_or(d.boundary_edge_weight),
        diffusion: a.diffusion.unwrap_or(d.diffusion),
        retention: a.retention.unwrap_or(d.retention),
        period: a.period.unwrap_or(d.period),
        drive_amplitude: a.drive_amplitude.unwrap_or(d.drive_amplitude),
        boundary_noise: a.boundary_noise.unwrap_or(d.boundary_noise),
        baseline: a.baseline.unwrap_or(d.baseline),
        time_steps: a.time_steps.unwrap_or(d.time_steps),
        sampling_interval_minutes: a.interval.unwrap_or(d.sampling_interval_minutes),
        seed,
    };
    let dom = gen_domain(&cfg)?;
    ensure_dir(&a.out_dir)?;
    write_adjacency(a.out_dir.join("adjacency.csv"), &dom.graph)?;
    write_signals(a.out_dir.join("signals.csv"), &dom.signals)?;
    write_text(&a.out_dir.join("labels.csv"), &labels_csv(&dom.graph, &dom.labels))?;
    write_json(&a.out_dir.join("synth_config.json"), &cfg)?;
    info!("{} nodes, {} steps written to {}", dom.graph.n(), dom.signals.t(), a.out_dir.display());
    Ok(())
}

pub fn prune(a: &PruneArgs) -> Result<()> {
    let cfg = prune_config(&a.prune)?;
    let (graph, signals) = load_pair(&a.adjacency, &a.data)?;
    let horizon = horizon_steps(a.horizon_minutes, signals.sampling_interval_minutes)?;
    let train = chronological_split(signals.t(), a.history + horizon)?.train;
    let ctx = peel(&graph, &signals.columns(train.clone()), &cfg)?;
    let pruned = ctx.pruned_graph(&graph);
    ensure_dir(&a.out_dir)?;
    write_adjacency(a.out_dir.join("pruned_adjacency.csv"), &pruned)?;
    let mut kept = pruned.node_ids.join("\n");
    kept.push('\n');
    write_text(&a.out_dir.join("kept_nodes.txt"), &kept)?;
    let layers: Vec<_> = ctx
        .peel_history
        .iter()
        .map(|l| {
            json!({
                "removed": l.removed.iter().map(|&i| &graph.node_ids[i]).collect::<Vec<_>>(),
                "threshold_used": l.threshold_used,
            })
        })
        .collect();
    let report = json!({
        "layers": layers,
        "config": cfg,
        "original_nodes": graph.n(),
        "kept_nodes": pruned.n(),
        "original_edges": graph.edge_count(),
        "kept_edges": pruned.edge_count(),
        "score_rows": train.len(),
    });
    write_json(&a.out_dir.join("peel_report.json"), &report)?;
    info!("kept {} of {} nodes", pruned.n(), graph.n());
    Ok(())
}

fn read_kept(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if ids.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "no node ids".into(),
        });
    }
    Ok(ids)
}

pub fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let (mut graph, mut signals) = load_pair(&a.adjacency, &a.data)?;
    if let Some(path) = &a.kept_nodes {
        let ids = read_kept(path)?;
        signals = signals.select_ids(&ids)?;
        let idx: Vec<usize> = ids.iter().map(|id| graph.index_of(id).expect("checked by select_ids")).collect();
        graph = graph.induced(&idx);
    }
    let cfg = PipelineConfig {
        model: model_config(&a.model),
        train: train_config(TrainConfig::default(), &a.train, seed),
        prune: a.prune.then(PruneConfig::default),
        horizon_minutes: a.model.horizon_minutes,
    };
    let out = pretrain(&graph, &signals, &cfg)?;
    out.checkpoint.save(&a.out_ckpt)?;
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &out.history)?;
    }
    if let Some(p) = &a.report {
        write_json(p, &out.report)?;
    }
    info!(
        "test MAE {:.4} (historical average {:.4}) on {} nodes",
        out.report.model.mae, out.report.historical_average.mae, out.report.nodes
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let signals = load_signals(&a.data.signals, a.data.interval)?;
    let domain = checkpoint_domain(&ck, &signals)?;
    let report = evaluate_test(&ck.params, &domain)?;
    let out = json!({
        "model": report.model,
        "historical_average": report.historical_average,
        "test_windows": report.test_windows,
        "nodes": report.nodes,
        "horizon_minutes": ck.header.horizon_minutes,
    });
    write_json(&a.out, &out)?;
    if let Some(p) = &a.per_node {
        let mut s = String::from("node,mae,rmse,mape\n");
        for (id, m) in per_node_test_metrics(&ck.params, &domain)? {
            s.push_str(&format!("{id},{},{},{}\n", m.mae, m.rmse, m.mape));
        }
        write_text(p, &s)?;
    }
    info!("test MAE {:.4} (historical average {:.4})", report.model.mae, report.historical_average.mae);
    Ok(())
}

pub fn finetune_cmd(a: &FinetuneArgs, seed: u64) -> Result<()> {
    if !(a.ts_ratio > 0.0 && a.ts_ratio <= 1.0) {
        return Err(Error::Config(format!("--ts-ratio {} must be in (0, 1]", a.ts_ratio)));
    }
    let ck = Checkpoint::load(&a.source_ckpt)?;
    let (graph, signals) = load_pair(&a.adjacency, &a.data)?;
    let cfg = TransferConfig {
        ts_ratio: a.ts_ratio,
        prune: (!a.no_prune).then(|| ck.header.prune_config.unwrap_or_default()),
        train: train_config(ck.header.train_config, &a.train, seed),
    };
    let out = finetune(&ck, &graph, &signals, &cfg)?;
    out.checkpoint.save(&a.out_ckpt)?;
    write_json(&a.report, &out.report)?;
    if let Some(p) = &a.loss_csv {
        write_loss_csv(p, &out.history)?;
    }
    info!("target MAE {:.4} with {} windows", out.report.mae, out.report.train_windows);
    Ok(())
}

pub fn audit_cmd(a: &AuditArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let signals = load_signals(&a.data, a.interval)?;
    let domain = checkpoint_domain(&ck, &signals)?;
    let train = &domain.splits.train.windows;
    let m = a.m.unwrap_or(train.len());
    if m == 0 || m > train.len() {
        return Err(Error::Config(format!("--m {m} must be in 1..={}", train.len())));
    }
    let samples: Vec<Tensor3> = train[..m]
        .iter()
        .map(|w| Tensor3::from_matrix(&w.input))
        .collect();
    let report = audit(&ck.params, &domain.a_hat, &samples, a.delta)?;
    report.write(&a.out_json, &a.out_csv)?;
    info!("gap bound {:.4e} over m = {m}", report.gap_bound);
    Ok(())
}

pub fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let mut cfg = BenchConfig::default();
    cfg.source.seed = seed;
    cfg.target.seed = seed + 1000;
    cfg.seeds = (0..a.seeds).collect();
    cfg.ratios = a.ratios.clone();
    if let Some(e) = a.pretrain_epochs {
        cfg.pretrain.max_epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.finetune.max_epochs = e;
    }
    let table = transfer_benchmark(&cfg)?;
    write_text(&a.out, &table.summary_csv())?;
    if let Some(p) = &a.records {
        write_json(p, &json!({ "pretrain": table.pretrain, "records": table.records }))?;
    }
    let mut err = std::io::stderr().lock();
    for r in &table.summary {
        let _ = writeln!(err, "{:>5.2} {:<9} MAE {:.4} ± {:.4}", r.ratio, r.variant.name(), r.mae_mean, r.mae_std);
    }
    Ok(())
}
