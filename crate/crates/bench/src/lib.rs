//! Seeded inputs shared by the benchmarks.

use ndarray::{Array1, Array2, Array3};
use prunecast_core::model::{ModelConfig, ModelParams};
use prunecast_core::pruning::normalize_adjacency;
use prunecast_core::{ConvFilter, SignalMatrix, Tensor3, TrafficGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(r: &mut ChaCha8Rng, c: usize, n: usize, t: usize) -> Tensor3 {
    Tensor3::from_vec((c, n, t), (0..c * n * t).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn filter(r: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvFilter {
    let w = Array3::from_shape_fn((c_out, c_in, k), |_| r.random_range(-0.5..0.5));
    ConvFilter::new(w, Array1::zeros(c_out)).unwrap()
}

/// Symmetric random graph with edge probability `p`.
pub fn graph(r: &mut ChaCha8Rng, n: usize, p: f64) -> TrafficGraph {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(p) {
                let w = r.random_range(0.1..1.0);
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
    }
    TrafficGraph::with_default_ids(a).unwrap()
}

pub fn signals(r: &mut ChaCha8Rng, g: &TrafficGraph, t: usize) -> SignalMatrix {
    let v = Array2::from_shape_fn((g.n(), t), |_| r.random_range(0.0..100.0));
    SignalMatrix::new(v, 5.0, g.node_ids.clone()).unwrap()
}

/// Default-width model over `n` nodes with its propagation matrix.
pub fn model(r: &mut ChaCha8Rng, n: usize) -> (ModelParams, Array2<f64>) {
    let cfg = ModelConfig { n_nodes: n, ..ModelConfig::default() };
    let g = graph(r, n, 0.2);
    (ModelParams::init(&cfg, 42).unwrap(), normalize_adjacency(&g.adjacency))
}
