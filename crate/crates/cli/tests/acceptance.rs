//! End-to-end acceptance run: one PASS/FAIL line per criterion.

#[path = "../../core/tests/common/pruning_oracle.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use prunecast_core::audit::{audit, generalization_gap_bound, linear_rad_bound};
use prunecast_core::data::{apply_zscore, fit_zscore, reduct};
use prunecast_core::gradcheck::check_gradients;
use prunecast_core::model::{BlockChannels, ModelConfig, ModelParams};
use prunecast_core::pruning::{
    abs_pearson, bin_distribution, edge_scores, node_entropy, normalize_adjacency, outer_layer_nodes,
    threshold_adjacency,
};
use prunecast_core::synth::{gen_domain, transfer_benchmark, BenchConfig, Recovery, SynthConfig, Variant};
use prunecast_core::transfer::{checkpoint_domain, prepare_domain, pretrain, PipelineConfig};
use prunecast_core::{PruneConfig, SignalMatrix, Tensor3, ThresholdMode, TrafficGraph, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Verdict {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("n{i}")).collect()
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig {
        blocks: vec![BlockChannels { c_in: 1, c_hidden: 3, c_out: 3 }],
        kernel_time: 2,
        history: 8,
        horizon_steps: 2,
        head_channels: 3,
        n_nodes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut params = ModelParams::init(&cfg, 42).unwrap();
    // Keeps ReLU inputs off the exact kink that zero-initialized biases create.
    let jittered: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    params.assign_flat(&jittered).unwrap();
    let a = ndarray::array![
        [0.0, 1.0, 0.0, 0.5],
        [1.0, 0.0, 2.0, 0.0],
        [0.0, 2.0, 0.0, 1.0],
        [0.5, 0.0, 1.0, 0.0]
    ];
    let a_hat = normalize_adjacency(&a);
    let inputs: Vec<Tensor3> = (0..4)
        .map(|_| Tensor3::from_vec((1, 4, 8), (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect();
    let targets: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let batch: Vec<_> = inputs.iter().zip(&targets).collect();
    let entries = check_gradients(&params, &a_hat, &batch, 20, 1e-5, 5).unwrap();
    let worst = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("{} coordinates, worst rel. error {worst:.2e}, {secs:.2}s", entries.len());
    check(worst < 1e-4 && secs < 30.0, msg.clone(), msg)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = rng.random_range(2..=8);
    let t = rng.random_range(2..=50);
    let symmetric = rng.random_bool(0.5);
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && (!symmetric || j > i) && rng.random_bool(0.5) {
                let w = rng.random_range(0.1..2.0);
                a[i][j] = w;
                if symmetric {
                    a[j][i] = w;
                }
            }
        }
    }
    let base: Vec<f64> = (0..t).map(|_| rng.random_range(-5.0..5.0)).collect();
    let x = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => vec![rng.random_range(-3.0..3.0); t],
            1 => base.iter().map(|v| -1.5 * v + rng.random_range(-0.5..0.5)).collect(),
            _ => (0..t).map(|_| rng.random_range(-10.0..10.0)).collect(),
        })
        .collect();
    (a, x)
}

fn pruning_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (a, x) = random_instance(&mut rng);
        let n = a.len();
        let g = TrafficGraph::new(Array2::from_shape_fn((n, n), |(i, j)| a[i][j]), ids(n)).unwrap();
        let sig = SignalMatrix::new(Array2::from_shape_fn((n, x[0].len()), |(i, k)| x[i][k]), 5.0, ids(n)).unwrap();
        let (mode, omode) = match case % 3 {
            0 => {
                let tau = rng.random_range(0.0..2.0);
                (ThresholdMode::Absolute { tau }, oracle::Mode::Tau(tau))
            }
            1 => {
                let q = rng.random_range(0.05..0.95);
                (ThresholdMode::Quantile { q }, oracle::Mode::Quantile(q))
            }
            _ => {
                let k = rng.random_range(1..=3);
                (ThresholdMode::TopK { k }, oracle::Mode::TopK(k))
            }
        };
        let d_min = rng.random_range(0..=2);
        let cfg = PruneConfig { threshold: mode, d_min, ..PruneConfig::default() };
        let s = edge_scores(&g, &sig, &cfg).unwrap();
        let expected = oracle::scores(&a, &x, cfg.bins, cfg.epsilon);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((s.scores[[i, j]] - expected[i][j]).abs());
            }
        }
        let lib = threshold_adjacency(&s, &g, &cfg);
        match oracle::threshold(&a, &expected, &omode) {
            None if lib.is_err() => {}
            None => return Err(format!("case {case}: oracle threshold degenerate, library accepted")),
            Some(mask) => {
                let lib = lib.map_err(|e| format!("case {case}: {e}"))?;
                let same = (0..n).all(|i| (0..n).all(|j| lib.mask[[i, j]] as u8 == mask[i][j]));
                if !same {
                    return Err(format!("case {case}: thresholded masks differ"));
                }
                if outer_layer_nodes(&lib.mask, d_min) != oracle::outer(&mask, d_min) {
                    return Err(format!("case {case}: outer layers differ"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("200 graphs, max score deviation {worst:.1e}, {secs:.2}s");
    check(worst <= 1e-10 && secs < 10.0, msg.clone(), msg)
}

fn entropy_and_correlation() -> Verdict {
    let eps = 1e-8;
    let b = 16;
    // Bin centres repeated five times fill every bin equally.
    let uniform: Vec<f64> = (0..5).flat_map(|_| (0..b).map(|j| j as f64 + 0.5)).collect();
    let h = node_entropy(&bin_distribution(&uniform, b).unwrap(), eps).unwrap();
    let h_err = (h - (b as f64).ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut r_err = 0.0f64;
    for (m, c) in [(3.0, -7.0), (-2.0, 1.0), (0.01, 100.0)] {
        let y: Vec<f64> = x.iter().map(|v| m * v + c).collect();
        r_err = r_err.max((abs_pearson(&x, &y, eps).unwrap() - 1.0).abs());
    }

    // A constant node joined to a clique of mixed signals: every edge it
    // touches must score below every edge among the mixed nodes.
    let mut suppressed = true;
    for _ in 0..20 {
        let n = 6;
        let t = 120;
        let base: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = Array2::from_shape_fn((n, t), |(i, k)| match i {
            0 => 4.0,
            _ => base[k] * i as f64 + rng.random_range(-1.0..1.0),
        });
        let a = Array2::from_shape_fn((n, n), |(i, j)| f64::from(i != j));
        let g = TrafficGraph::new(a, ids(n)).unwrap();
        let s = edge_scores(&g, &SignalMatrix::new(v, 5.0, ids(n)).unwrap(), &PruneConfig::default()).unwrap();
        let worst_const = (1..n).map(|j| s.scores[[0, j]].max(s.scores[[j, 0]])).fold(f64::MIN, f64::max);
        let best_mixed = (1..n)
            .flat_map(|i| (1..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.scores[[i, j]])
            .fold(f64::MAX, f64::min);
        suppressed &= worst_const < best_mixed;
    }
    let msg = format!("|H - ln B| = {h_err:.1e}, affine |r| error {r_err:.1e}, constant suppression {suppressed}");
    check(h_err <= 1e-6 && r_err <= 1e-6 && suppressed, msg.clone(), msg)
}

fn normalization_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(1..8);
        let t = rng.random_range(2..60);
        let scale = 10f64.powi(rng.random_range(-2..4));
        let mut x = Array2::from_shape_fn((n, t), |_| rng.random_range(-scale..scale));
        if case % 2 == 0 {
            let c = rng.random_range(-50.0..50.0);
            x.row_mut(rng.random_range(0..n)).fill(c);
        }
        let stats = fit_zscore(x.view()).unwrap();
        let back = reduct(&apply_zscore(&x, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let msg = format!("100 matrices, max |reduct(z(x)) - x| = {worst:.1e}");
    check(worst <= 1e-9, msg.clone(), msg)
}

fn boundary_recovery() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 42..47 {
        let d = gen_domain(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let dom = prepare_domain(&d.graph, &d.signals, Some(&PruneConfig::default()), 12, 15.0, None).unwrap();
        let r = Recovery::from_kept(&d.graph.node_ids, &d.labels, &dom.graph.node_ids);
        ok &= r.boundary_rate() >= 0.8 && r.core_rate() <= 0.2;
        lines.push(format!("seed {seed}: boundary {:.0}% core {:.0}%", 100.0 * r.boundary_rate(), 100.0 * r.core_rate()));
    }
    let msg = lines.join("; ");
    check(ok, msg.clone(), msg)
}

fn transfer_benchmark_criteria() -> (Verdict, Verdict) {
    let start = Instant::now();
    let table = match transfer_benchmark(&BenchConfig::default()) {
        Ok(t) => t,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let secs = start.elapsed().as_secs_f64();
    let mae = |r: f64, v: Variant| table.row(r, v).map(|row| row.mae_mean).unwrap_or(f64::NAN);

    let mut benefit = secs < 1200.0;
    let mut parts = Vec::new();
    for r in [0.05, 0.10, 0.15] {
        let (p, u) = (mae(r, Variant::Pruned), mae(r, Variant::Unpruned));
        benefit &= p < u;
        parts.push(format!("{:.0}%: pruned {p:.3} vs unpruned {u:.3}", 100.0 * r));
    }
    let msg6 = format!("{}; {secs:.0}s", parts.join(", "));

    let mut budget = true;
    let mut parts = Vec::new();
    for v in [Variant::Pruned, Variant::Unpruned] {
        let (lo, hi) = (mae(0.05, v), mae(0.25, v));
        budget &= hi < lo;
        parts.push(format!("{}: 5% {lo:.3} -> 25% {hi:.3}", v.name()));
    }
    let msg7 = parts.join(", ");
    (check(benefit, msg6.clone(), msg6), check(budget, msg7.clone(), msg7))
}

fn capacity_audit() -> Verdict {
    let lin = linear_rad_bound(2.0, 3.0, 36).unwrap();
    let delta = 2.0 / std::f64::consts::E.powi(2);
    let gap = generalization_gap_bound(0.0, 50, delta).unwrap();

    let d = gen_domain(&SynthConfig::default()).unwrap();
    let bench = BenchConfig::default();
    let mut rows = Vec::new();
    for wd in [0.0, 5e-4, 5e-3] {
        let cfg = PipelineConfig {
            model: bench.model.clone(),
            train: TrainConfig { weight_decay: wd, ..bench.pretrain },
            prune: Some(PruneConfig::default()),
            horizon_minutes: 15.0,
        };
        let trained = pretrain(&d.graph, &d.signals, &cfg).unwrap();
        let dom = checkpoint_domain(&trained.checkpoint, &d.signals).unwrap();
        let samples: Vec<Tensor3> = dom.splits.train.windows[..128].iter().map(|w| Tensor3::from_matrix(&w.input)).collect();
        let report = audit(&trained.checkpoint.params, &dom.a_hat, &samples, 0.05).unwrap();
        rows.push((wd, report.total_frobenius, report.summed_conv_rad));
    }
    let order = |key: fn(&(f64, f64, f64)) -> f64| {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&a, &b| key(&rows[a]).total_cmp(&key(&rows[b])));
        idx
    };
    let same_order = order(|r| r.1) == order(|r| r.2);
    let norms: Vec<String> = rows.iter().map(|(wd, f, r)| format!("wd {wd:e}: |W|_F {f:.4}, sum rad {r:.4}")).collect();
    let msg = format!("linear {lin}, gap {gap:.6}; {}", norms.join(", "));
    check(lin == 1.0 && (gap - 0.424264).abs() <= 1e-6 && same_order, msg.clone(), msg)
}

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_prunecast"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

const PIPELINE: &[&[&str]] = &[
    &["synth", "--out-dir", "src", "--n-core", "12", "--n-boundary", "4", "--time-steps", "700"],
    &["synth", "--out-dir", "tgt", "--n-core", "10", "--n-boundary", "3", "--time-steps", "700", "--seed", "43"],
    &["prune", "--adjacency", "src/adjacency.csv", "--signals", "src/signals.csv", "--out-dir", "pr"],
    &[
        "train", "--adjacency", "pr/pruned_adjacency.csv", "--signals", "src/signals.csv", "--kept-nodes",
        "pr/kept_nodes.txt", "--channels", "4", "--head-channels", "4", "--epochs", "3", "--lr", "3e-3",
        "--out-ckpt", "m.ckpt", "--loss-csv", "loss.csv", "--report", "train.json",
    ],
    &["eval", "--ckpt", "m.ckpt", "--signals", "src/signals.csv", "--out", "eval.json", "--per-node", "nodes.csv"],
    &[
        "finetune", "--source-ckpt", "m.ckpt", "--adjacency", "tgt/adjacency.csv", "--signals", "tgt/signals.csv",
        "--ts-ratio", "0.1", "--epochs", "2", "--out-ckpt", "f.ckpt", "--report", "finetune.json",
    ],
    &["audit", "--ckpt", "f.ckpt", "--data", "tgt/signals.csv", "--m", "50", "--out-json", "audit.json", "--out-csv", "audit.csv"],
    &["bench", "--out", "bench.csv", "--records", "bench.json", "--seeds", "1", "--ratios", "0.1", "--pretrain-epochs", "1", "--finetune-epochs", "1"],
];

const ARTIFACTS: &[&str] = &[
    "src/adjacency.csv", "src/signals.csv", "src/labels.csv", "tgt/signals.csv", "pr/pruned_adjacency.csv",
    "pr/kept_nodes.txt", "pr/peel_report.json", "m.ckpt", "loss.csv", "train.json", "eval.json", "nodes.csv",
    "f.ckpt", "finetune.json", "audit.json", "audit.csv", "bench.csv", "bench.json",
];

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for args in PIPELINE {
            run(d.path(), args)?;
        }
    }
    let mut differing = Vec::new();
    for f in ARTIFACTS {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differing.push(*f);
        }
    }
    check(
        differing.is_empty(),
        format!("{} artifacts byte-identical across two seed-42 runs", ARTIFACTS.len()),
        format!("differing artifacts: {differing:?}"),
    )
}

/// Rewrites an edge-list adjacency as an `N x N` grid headed by node ids.
fn edge_list_to_grid(edges: &Path, signals: &Path, out: &Path) {
    let header = std::fs::read_to_string(signals).unwrap().lines().next().unwrap().to_string();
    let ids: Vec<&str> = header.split(',').collect();
    let mut grid = vec![vec![0.0; ids.len()]; ids.len()];
    for line in std::fs::read_to_string(edges).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let i = ids.iter().position(|x| *x == f[0]).unwrap();
        let j = ids.iter().position(|x| *x == f[1]).unwrap();
        grid[i][j] = f[2].parse().unwrap();
    }
    let mut s = header.clone() + "\n";
    for row in grid {
        s += &row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        s.push('\n');
    }
    std::fs::write(out, s).unwrap();
}

fn ingestion() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(d, &["synth", "--out-dir", "data", "--retention", "0.995"])?;
    edge_list_to_grid(&d.join("data/adjacency.csv"), &d.join("data/signals.csv"), &d.join("grid.csv"));
    run(d, &["prune", "--adjacency", "grid.csv", "--signals", "data/signals.csv", "--out-dir", "pr"])?;
    run(
        d,
        &[
            "train", "--adjacency", "pr/pruned_adjacency.csv", "--signals", "data/signals.csv", "--kept-nodes",
            "pr/kept_nodes.txt", "--channels", "8", "--head-channels", "8", "--epochs", "20", "--lr", "3e-3",
            "--patience", "5", "--out-ckpt", "m.ckpt",
        ],
    )?;
    run(d, &["eval", "--ckpt", "m.ckpt", "--signals", "data/signals.csv", "--out", "eval.json"])?;
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    let get = |k: &str, m: &str| v[k][m].as_f64().unwrap_or(f64::NAN);
    let finite = ["model", "historical_average"]
        .iter()
        .all(|k| ["mae", "rmse", "mape"].iter().all(|m| get(k, m).is_finite()));
    let (model, ha) = (get("model", "mae"), get("historical_average", "mae"));
    let msg = format!("model MAE {model:.4} vs historical average {ha:.4} on {} nodes", v["nodes"]);
    check(finite && model < ha, msg.clone(), msg)
}

fn main() {
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let guard = |f: &dyn Fn() -> Verdict| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    results.push((1, "gradient fidelity", guard(&gradient_fidelity)));
    results.push((2, "pruning oracle equivalence", guard(&pruning_oracle)));
    results.push((3, "entropy and correlation analytics", guard(&entropy_and_correlation)));
    results.push((4, "normalization round trip", guard(&normalization_round_trip)));
    results.push((5, "synthetic boundary recovery", guard(&boundary_recovery)));
    let (c6, c7) = catch_unwind(transfer_benchmark_criteria)
        .unwrap_or_else(|_| (Err("benchmark panicked".into()), Err("benchmark panicked".into())));
    results.push((6, "transfer benefit", c6));
    results.push((7, "budget monotonicity", c7));
    results.push((8, "capacity audit", guard(&capacity_audit)));
    results.push((9, "determinism", guard(&determinism)));
    results.push((10, "data ingestion", guard(&ingestion)));

    let mut failed = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Ok(m) => println!("criterion {id:>2} {name}: PASS ({m})"),
            Err(m) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({m})");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
