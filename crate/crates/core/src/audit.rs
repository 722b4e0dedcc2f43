//! Capacity audit of a trained forecaster: per-layer norm-based Rademacher
//! bounds, Lipschitz products from power-iterated spectral norms, and the
//! resulting generalization-gap bound.
//!
//! Norms are Frobenius throughout. A layer's feature bound `B` is the largest
//! Frobenius norm, over the audited samples, of the stacked input patches
//! that layer's filter is applied to. The graph layer is treated as a conv
//! layer whose patch operator already contains the fixed `a_hat`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tcl_forward, ModelParams};
use crate::tensor::{causal_conv1d, causal_conv1d_backward, graph_conv, ConvFilter, Tensor3};

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_DELTA: f64 = 0.05;

/// `Λ·B/√m`.
pub fn linear_rad_bound(lambda: f64, feature_bound: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Config("sample count m must be at least 1".into()));
    }
    if !(lambda >= 0.0 && feature_bound >= 0.0) {
        return Err(Error::Config(format!("norms must be non-negative, got {lambda} and {feature_bound}")));
    }
    Ok(lambda * feature_bound / (m as f64).sqrt())
}

/// Align and causal branches of a temporal layer add; ReLU contracts by 1.
pub fn tcl_rad_bound(align_term: f64, causal_term: f64, m: usize) -> Result<f64> {
    Ok(linear_rad_bound(align_term, 1.0, m)? + linear_rad_bound(causal_term, 1.0, m)?)
}

/// `(Π L_ℓ) · base`.
pub fn lipschitz_network_bound(factors: &[f64], base_complexity: f64) -> Result<f64> {
    if factors.iter().chain([&base_complexity]).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config("Lipschitz factors and base complexity must be finite and non-negative".into()));
    }
    Ok(factors.iter().product::<f64>() * base_complexity)
}

/// `2·rad + 3·√(ln(2/δ)/(2m))`.
pub fn generalization_gap_bound(rad: f64, m: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta {delta} must lie in (0, 1)")));
    }
    if m == 0 {
        return Err(Error::Config("sample count m must be at least 1".into()));
    }
    Ok(2.0 * rad + 3.0 * ((2.0 / delta).ln() / (2.0 * m as f64)).sqrt())
}

/// A linear map given only through its action and its adjoint.
pub trait LinearOperator {
    fn dim_in(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

pub struct DenseOperator<'a>(pub &'a Array2<f64>);

impl LinearOperator for DenseOperator<'_> {
    fn dim_in(&self) -> usize {
        self.0.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.dot(&Array1::from(x.to_vec())).to_vec()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.0.t().dot(&Array1::from(y.to_vec())).to_vec()
    }
}

/// Bias-free causal convolution of a single node's `c_in x time_steps` series.
pub struct ConvOperator {
    filter: ConvFilter,
    time_steps: usize,
}

impl ConvOperator {
    pub fn new(weights: &Array3<f64>, time_steps: usize) -> Result<Self> {
        let (c_out, _, k) = weights.dim();
        if time_steps < k {
            return Err(Error::Shape(format!("operator over {time_steps} steps, kernel {k}")));
        }
        let filter = ConvFilter::new(weights.clone(), Array1::zeros(c_out))?;
        Ok(ConvOperator { filter, time_steps })
    }

    fn out_steps(&self) -> usize {
        self.time_steps - self.filter.kernel_time() + 1
    }
}

impl LinearOperator for ConvOperator {
    fn dim_in(&self) -> usize {
        self.filter.c_in() * self.time_steps
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let t = Tensor3::from_vec((self.filter.c_in(), 1, self.time_steps), x.to_vec()).expect("operator input length");
        causal_conv1d(&t, &self.filter).expect("operator shapes").as_slice().to_vec()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let x = Tensor3::zeros(self.filter.c_in(), 1, self.time_steps);
        let g = Tensor3::from_vec((self.filter.c_out(), 1, self.out_steps()), y.to_vec()).expect("operator output length");
        causal_conv1d_backward(&x, &self.filter, &g)
            .expect("operator shapes")
            .0
            .as_slice()
            .to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `AᵀA` from a fixed seeded start.
pub fn spectral_norm(op: &dyn LinearOperator, max_iter: usize, tol: f64) -> SpectralEstimate {
    let n = op.dim_in();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut sigma = 0.0;
    for it in 1..=max_iter {
        let nv = norm(&v);
        if nv == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let av = op.apply(&v);
        let next = norm(&av);
        let w = op.apply_transpose(&av);
        let done = (next - sigma).abs() <= tol * next.max(f64::MIN_POSITIVE);
        sigma = next;
        v = w;
        if done {
            return SpectralEstimate {
                value: sigma,
                iterations: it,
                converged: true,
            };
        }
    }
    log::warn!("power iteration did not reach tolerance {tol} in {max_iter} iterations");
    SpectralEstimate {
        value: sigma,
        iterations: max_iter,
        converged: false,
    }
}

fn estimate(op: &dyn LinearOperator) -> SpectralEstimate {
    spectral_norm(op, POWER_ITERATIONS, POWER_TOLERANCE)
}

fn frobenius<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm of every length-`k` patch of every node, stacked.
pub fn causal_patch_norm(x: &Tensor3, k: usize) -> f64 {
    let (c, n, t) = x.dims();
    if t < k {
        return 0.0;
    }
    let a = x.array();
    let mut sum = 0.0;
    for i in 0..c {
        for node in 0..n {
            for s in 0..=t - k {
                for j in 0..k {
                    let v = a[[i, node, s + j]];
                    sum += v * v;
                }
            }
        }
    }
    sum.sqrt()
}

/// Patches of a 1x1 align map restricted to the `keep` most recent steps.
fn align_patch_norm(x: &Tensor3, keep: usize) -> f64 {
    let t = x.time_steps();
    let a = x.array();
    frobenius(a.slice(ndarray::s![.., .., t - keep..]).iter())
}

/// `max_i Λ·B_i/√m` for a single conv filter over per-sample inputs.
pub fn conv_layer_bound(weights: &Array3<f64>, inputs: &[Tensor3], m: usize) -> Result<f64> {
    let k = weights.dim().2;
    let b = inputs.iter().map(|x| causal_patch_norm(x, k)).fold(0.0, f64::max);
    linear_rad_bound(frobenius(weights.iter()), b, m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub name: String,
    /// Frobenius norm of the weights (bias excluded).
    pub lambda: f64,
    /// Max over samples of the stacked input-patch Frobenius norm.
    pub feature_bound: f64,
    pub rad_bound: f64,
    /// Spectral norm of the weights reshaped to `c_out x (c_in·k)`; never above `lambda`.
    pub filter_spectral_norm: f64,
    /// Spectral norm of the layer's linear map on one window.
    pub operator_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockLipschitz {
    pub block: usize,
    pub tcl1: f64,
    pub gcl: f64,
    pub tcl2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub norm_convention: String,
    pub m: usize,
    pub delta: f64,
    pub total_frobenius: f64,
    pub layers: Vec<LayerCapacity>,
    pub tcl_rad_bounds: Vec<f64>,
    pub summed_conv_rad: f64,
    pub blocks: Vec<BlockLipschitz>,
    pub head_lipschitz: f64,
    pub a_hat_spectral_norm: f64,
    pub input_bound: f64,
    pub base_complexity: f64,
    /// `(Π L_ℓ)·head·B_input/√m`; the Rademacher term fed to the gap bound.
    pub network_complexity: f64,
    pub gap_bound: f64,
}

impl CapacityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `layer,lambda,feature_bound,rad_bound,filter_spectral_norm,operator_norm`.
    pub fn layers_csv(&self) -> String {
        let mut s = String::from("layer,lambda,feature_bound,rad_bound,filter_spectral_norm,operator_norm\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l.name, l.lambda, l.feature_bound, l.rad_bound, l.filter_spectral_norm, l.operator_norm
            );
        }
        s
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()? + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.layers_csv()).map_err(|e| Error::io(csv_path, e))
    }

    pub fn all_finite_nonnegative(&self) -> bool {
        let mut vals = vec![
            self.total_frobenius,
            self.summed_conv_rad,
            self.head_lipschitz,
            self.a_hat_spectral_norm,
            self.input_bound,
            self.base_complexity,
            self.network_complexity,
            self.gap_bound,
        ];
        vals.extend(&self.tcl_rad_bounds);
        for l in &self.layers {
            vals.extend([l.lambda, l.feature_bound, l.rad_bound, l.filter_spectral_norm, l.operator_norm]);
        }
        for b in &self.blocks {
            vals.extend([b.tcl1, b.gcl, b.tcl2, b.total]);
        }
        vals.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

fn filter_matrix(w: &Array3<f64>) -> Array2<f64> {
    let (o, i, k) = w.dim();
    w.to_shape((o, i * k)).expect("contiguous filter").to_owned()
}

struct LayerAccumulator {
    name: String,
    weights: Array3<f64>,
    /// Time length of this layer's input, for the operator norm.
    time_steps: usize,
    feature_bound: f64,
}

impl LayerAccumulator {
    fn new(name: String, weights: Array3<f64>, time_steps: usize) -> Self {
        LayerAccumulator {
            name,
            weights,
            time_steps,
            feature_bound: 0.0,
        }
    }

    fn observe(&mut self, b: f64) {
        self.feature_bound = self.feature_bound.max(b);
    }

    fn finish(self, m: usize, operator: SpectralEstimate) -> Result<LayerCapacity> {
        let lambda = frobenius(self.weights.iter());
        let filt = estimate(&DenseOperator(&filter_matrix(&self.weights)));
        Ok(LayerCapacity {
            rad_bound: linear_rad_bound(lambda, self.feature_bound, m)?,
            name: self.name,
            lambda,
            feature_bound: self.feature_bound,
            filter_spectral_norm: filt.value.min(lambda),
            operator_norm: operator.value,
            converged: operator.converged && filt.converged,
        })
    }
}

/// Audits `params` on the given normalized input windows (`1 x N x H` each).
pub fn audit(params: &ModelParams, a_hat: &Array2<f64>, samples: &[Tensor3], delta: f64) -> Result<CapacityReport> {
    let m = samples.len();
    if m == 0 {
        return Err(Error::Config("capacity audit needs at least one sample".into()));
    }
    generalization_gap_bound(0.0, m, delta)?;
    let cfg = &params.config;
    let k = cfg.kernel_time;

    let mut layers: Vec<LayerAccumulator> = Vec::new();
    let mut t = cfg.history;
    for (b, bp) in params.blocks.iter().enumerate() {
        let t_mid = t - (k - 1);
        layers.push(LayerAccumulator::new(format!("block{b}.tcl1.causal"), bp.tcl1.causal.weights.clone(), t));
        layers.push(LayerAccumulator::new(format!("block{b}.tcl1.align"), bp.tcl1.align.weights.clone(), t));
        let g = bp.gcl.t().to_owned().insert_axis(ndarray::Axis(2));
        layers.push(LayerAccumulator::new(format!("block{b}.gcl"), g, t_mid));
        layers.push(LayerAccumulator::new(format!("block{b}.tcl2.causal"), bp.tcl2.causal.weights.clone(), t_mid));
        layers.push(LayerAccumulator::new(format!("block{b}.tcl2.align"), bp.tcl2.align.weights.clone(), t_mid));
        t = t_mid - (k - 1);
    }
    layers.push(LayerAccumulator::new("head.conv".into(), params.head.conv.weights.clone(), t));
    let lin = params.head.linear_w.clone().insert_axis(ndarray::Axis(2));
    layers.push(LayerAccumulator::new("head.linear".into(), lin, 1));

    let mut input_bound: f64 = 0.0;
    for x in samples {
        input_bound = input_bound.max(frobenius(x.as_slice()));
        let mut h = x.clone();
        let mut li = 0;
        for bp in &params.blocks {
            let keep = h.time_steps() - (k - 1);
            layers[li].observe(causal_patch_norm(&h, k));
            layers[li + 1].observe(align_patch_norm(&h, keep));
            let h1 = tcl_forward(&h, &bp.tcl1.causal, &bp.tcl1.align)?;
            let identity = Array2::eye(h1.channels());
            layers[li + 2].observe(frobenius(graph_conv(&h1, a_hat, &identity)?.as_slice()));
            let g = graph_conv(&h1, a_hat, &bp.gcl)?.relu();
            let keep = g.time_steps() - (k - 1);
            layers[li + 3].observe(causal_patch_norm(&g, k));
            layers[li + 4].observe(align_patch_norm(&g, keep));
            h = tcl_forward(&g, &bp.tcl2.causal, &bp.tcl2.align)?;
            li += 5;
        }
        layers[li].observe(frobenius(h.as_slice()));
        let act = causal_conv1d(&h, &params.head.conv)?.relu();
        layers[li + 1].observe(frobenius(act.as_slice()));
    }

    let a_norm = estimate(&DenseOperator(a_hat));
    let mut finished = Vec::with_capacity(layers.len());
    for acc in layers {
        let op = if acc.name.ends_with(".gcl") || acc.name == "head.linear" {
            estimate(&DenseOperator(&filter_matrix(&acc.weights)))
        } else {
            estimate(&ConvOperator::new(&acc.weights, acc.time_steps)?)
        };
        finished.push(acc.finish(m, op)?);
    }

    let mut tcl_rads = Vec::new();
    let mut blocks = Vec::new();
    for b in 0..params.blocks.len() {
        let l = &finished[5 * b..5 * b + 5];
        let term = |x: &LayerCapacity| x.lambda * x.feature_bound;
        tcl_rads.push(tcl_rad_bound(term(&l[1]), term(&l[0]), m)?);
        tcl_rads.push(tcl_rad_bound(term(&l[4]), term(&l[3]), m)?);
        let tcl1 = l[0].operator_norm + l[1].operator_norm;
        let gcl = a_norm.value * l[2].operator_norm;
        let tcl2 = l[3].operator_norm + l[4].operator_norm;
        blocks.push(BlockLipschitz {
            block: b,
            tcl1,
            gcl,
            tcl2,
            total: tcl1 * gcl * tcl2,
        });
    }
    let n_layers = finished.len();
    let head_lipschitz = finished[n_layers - 2].operator_norm * finished[n_layers - 1].operator_norm;
    let base_complexity = linear_rad_bound(1.0, input_bound, m)?;
    let mut factors: Vec<f64> = blocks.iter().map(|b| b.total).collect();
    factors.push(head_lipschitz);
    let network_complexity = lipschitz_network_bound(&factors, base_complexity)?;

    Ok(CapacityReport {
        norm_convention: "frobenius".into(),
        m,
        delta,
        total_frobenius: params.frobenius_norm(),
        summed_conv_rad: finished.iter().map(|l| l.rad_bound).sum(),
        layers: finished,
        tcl_rad_bounds: tcl_rads,
        blocks,
        head_lipschitz,
        a_hat_spectral_norm: a_norm.value,
        input_bound,
        base_complexity,
        network_complexity,
        gap_bound: generalization_gap_bound(network_complexity, m, delta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pruning::normalize_adjacency;
    use ndarray::array;

    #[test]
    fn linear_bound_arithmetic() {
        assert_eq!(linear_rad_bound(0.0, 5.0, 3).unwrap(), 0.0);
        assert_eq!(linear_rad_bound(2.0, 3.0, 36).unwrap(), 1.0);
        let a = linear_rad_bound(1.3, 2.1, 25).unwrap();
        let b = linear_rad_bound(1.3, 2.1, 100).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
        assert!(linear_rad_bound(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn tcl_bound_sums_terms() {
        assert_eq!(tcl_rad_bound(0.0, 0.0, 4).unwrap(), 0.0);
        assert!((tcl_rad_bound(0.1, 0.2, 1).unwrap() - 0.3).abs() < 1e-15);
        assert!(tcl_rad_bound(0.1, 0.2, 0).is_err());
    }

    #[test]
    fn lipschitz_products() {
        assert_eq!(lipschitz_network_bound(&[2.0, 0.0, 7.0], 1.0).unwrap(), 0.0);
        assert_eq!(lipschitz_network_bound(&[2.0, 3.0], 0.5).unwrap(), 3.0);
        assert!(lipschitz_network_bound(&[-1.0], 1.0).is_err());
    }

    #[test]
    fn gap_bound_values() {
        let delta = 2.0 / std::f64::consts::E.powi(2);
        assert!((generalization_gap_bound(0.0, 50, delta).unwrap() - 0.424264068711).abs() < 1e-9);
        assert!((generalization_gap_bound(0.1, 50, delta).unwrap() - 0.624264068711).abs() < 1e-9);
        assert!(generalization_gap_bound(0.0, 50, 1.0).is_err());
        assert!(generalization_gap_bound(0.0, 0, 0.5).is_err());
        let at = |m| generalization_gap_bound(linear_rad_bound(1.5, 4.0, m).unwrap(), m, 0.05).unwrap();
        assert!(at(400) < at(100));
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let d = Array2::from_diag(&array![1.0, 5.0, 2.0]);
        let s = spectral_norm(&DenseOperator(&d), POWER_ITERATIONS, POWER_TOLERANCE);
        assert!((s.value - 5.0).abs() < 1e-6);
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(spectral_norm(&DenseOperator(&z), 10, 1e-8).value, 0.0);
    }

    #[test]
    fn conv_operator_adjoint_is_consistent() {
        let w = Array3::from_shape_fn((2, 3, 2), |(o, i, k)| (o as f64 - i as f64) * 0.3 + k as f64 * 0.1);
        let op = ConvOperator::new(&w, 5).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let lhs: f64 = op.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.apply_transpose(&y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_conv_layer_bound() {
        let w = Array3::from_elem((1, 1, 1), 2.0);
        let x = Tensor3::from_vec((1, 1, 1), vec![3.0]).unwrap();
        assert_eq!(conv_layer_bound(&w, &[x.clone()], 1).unwrap(), 6.0);
        assert_eq!(conv_layer_bound(&Array3::zeros((1, 1, 1)), &[x.clone()], 1).unwrap(), 0.0);
        let scaled = conv_layer_bound(&w.mapv(|v| -3.0 * v), &[x], 1).unwrap();
        assert!((scaled - 18.0).abs() < 1e-12);
    }

    #[test]
    fn patch_norm_counts_overlaps() {
        // Series [1,2,3] with k=2 has patches [1,2] and [2,3].
        let x = Tensor3::from_vec((1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        assert!((causal_patch_norm(&x, 2) - 18f64.sqrt()).abs() < 1e-12);
    }

    fn model() -> (ModelParams, Array2<f64>, Vec<Tensor3>) {
        let mut cfg = ModelConfig::uniform(2, 4, 3, 12, 3);
        cfg.n_nodes = 5;
        let p = ModelParams::init(&cfg, 9).unwrap();
        let a = Array2::from_shape_fn((5, 5), |(i, j)| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 });
        let samples = (0..4)
            .map(|s| Tensor3::from_vec((1, 5, 12), (0..60).map(|i| ((i * (s + 1)) as f64 * 0.37).sin()).collect()).unwrap())
            .collect();
        (p, normalize_adjacency(&a), samples)
    }

    #[test]
    fn report_is_well_formed() {
        let (p, a, xs) = model();
        let r = audit(&p, &a, &xs, DEFAULT_DELTA).unwrap();
        assert_eq!(r.layers.len(), 12);
        assert_eq!(r.blocks.len(), 2);
        assert!(r.all_finite_nonnegative());
        assert!(r.gap_bound >= 2.0 * r.network_complexity);
        for l in &r.layers {
            assert!(l.filter_spectral_norm <= l.lambda + 1e-12, "{}", l.name);
            assert!(l.converged, "{}", l.name);
        }
        assert!((r.a_hat_spectral_norm - 1.0).abs() < 1e-6);
        assert_eq!(r.layers_csv().lines().count(), 13);
    }

    #[test]
    fn zero_weights_give_zero_layer_bounds() {
        let (mut p, a, xs) = model();
        p.blocks[0].tcl1.causal.weights.fill(0.0);
        let r = audit(&p, &a, &xs, DEFAULT_DELTA).unwrap();
        assert_eq!(r.layers[0].rad_bound, 0.0);
        assert_eq!(r.layers[0].operator_norm, 0.0);
    }

    #[test]
    fn first_layer_bound_is_homogeneous() {
        let (p, a, xs) = model();
        let mut q = p.clone();
        q.blocks[0].tcl1.causal.weights.mapv_inplace(|v| -2.5 * v);
        let r1 = audit(&p, &a, &xs, DEFAULT_DELTA).unwrap();
        let r2 = audit(&q, &a, &xs, DEFAULT_DELTA).unwrap();
        assert!((r2.layers[0].rad_bound - 2.5 * r1.layers[0].rad_bound).abs() < 1e-10);
    }
}
