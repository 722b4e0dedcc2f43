//! Spatiotemporal forecaster: stacked TCL-GCL-TCL blocks and a time-collapsing
//! head, with a hand-written backward pass.
//!
//! A temporal layer is `relu(align(x)[cropped] + causal_conv(x))`, where `align`
//! is a 1x1 convolution and the crop drops the first `K_t - 1` steps so both
//! branches line up. The graph layer is `relu(graph_conv(x, a_hat, W))`.
//! The head applies a convolution spanning every remaining step, a ReLU, and a
//! linear map from channels to the forecast horizon, shared by all nodes.
//!
//! No parameter shape depends on the node count, so the same weights run on
//! any graph.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::ParamEntry;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    causal_conv1d, causal_conv1d_backward, crop_tail_backward, graph_conv, graph_conv_backward,
    relu_backward, ConvFilter, Tensor3,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockChannels {
    pub c_in: usize,
    pub c_hidden: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: Vec<BlockChannels>,
    pub kernel_time: usize,
    pub history: usize,
    pub horizon_steps: usize,
    pub head_channels: usize,
    /// Informational only; no weight is sized by it.
    pub n_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: vec![
                BlockChannels {
                    c_in: 1,
                    c_hidden: 16,
                    c_out: 16,
                },
                BlockChannels {
                    c_in: 16,
                    c_hidden: 16,
                    c_out: 16,
                },
            ],
            kernel_time: 3,
            history: 12,
            horizon_steps: 3,
            head_channels: 16,
            n_nodes: 0,
        }
    }
}

impl ModelConfig {
    /// Blocks of equal width `channels`, the first taking one input channel.
    pub fn uniform(n_blocks: usize, channels: usize, kernel_time: usize, history: usize, horizon_steps: usize) -> Self {
        let blocks = (0..n_blocks)
            .map(|b| BlockChannels {
                c_in: if b == 0 { 1 } else { channels },
                c_hidden: channels,
                c_out: channels,
            })
            .collect();
        ModelConfig {
            blocks,
            kernel_time,
            history,
            horizon_steps,
            head_channels: channels,
            n_nodes: 0,
        }
    }

    /// Time steps left after every block; the head kernel spans all of them.
    pub fn remaining_time(&self) -> Option<usize> {
        let shrink = 2 * (self.kernel_time.saturating_sub(1)) * self.blocks.len();
        self.history.checked_sub(shrink).filter(|&r| r >= 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.kernel_time == 0 {
            return Err(Error::Config("temporal kernel must be >= 1".into()));
        }
        if self.horizon_steps == 0 || self.head_channels == 0 {
            return Err(Error::Config("horizon and head width must be >= 1".into()));
        }
        if self.blocks[0].c_in != 1 {
            return Err(Error::Config(format!(
                "first block takes 1 input channel, configured {}",
                self.blocks[0].c_in
            )));
        }
        for (b, ch) in self.blocks.iter().enumerate() {
            if ch.c_in == 0 || ch.c_hidden == 0 || ch.c_out == 0 {
                return Err(Error::Config(format!("block {b} has a zero channel count")));
            }
            if b > 0 && ch.c_in != self.blocks[b - 1].c_out {
                return Err(Error::Config(format!(
                    "block {b} takes {} channels but block {} emits {}",
                    ch.c_in,
                    b - 1,
                    self.blocks[b - 1].c_out
                )));
            }
        }
        if self.remaining_time().is_none() {
            return Err(Error::Config(format!(
                "history {} is exhausted by {} blocks with kernel {}",
                self.history,
                self.blocks.len(),
                self.kernel_time
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclParams {
    pub causal: ConvFilter,
    pub align: ConvFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub tcl1: TclParams,
    /// `c_hidden x c_hidden` channel mix of the graph layer.
    pub gcl: Array2<f64>,
    pub tcl2: TclParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub conv: ConvFilter,
    /// `horizon x head_channels`.
    pub linear_w: Array2<f64>,
    pub linear_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    pub rng_seed: u64,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

fn xavier_filter(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvFilter {
    let w = xavier(rng, &[c_out, c_in, k], c_in * k, c_out * k);
    ConvFilter {
        weights: Array3::from_shape_vec((c_out, c_in, k), w).expect("filter shape"),
        bias: Array1::zeros(c_out),
    }
}

impl ModelParams {
    /// Xavier-uniform weights and zero biases from a seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_time;
        let blocks = config
            .blocks
            .iter()
            .map(|ch| {
                let tcl1 = TclParams {
                    causal: xavier_filter(&mut rng, ch.c_hidden, ch.c_in, k),
                    align: xavier_filter(&mut rng, ch.c_hidden, ch.c_in, 1),
                };
                let gcl = Array2::from_shape_vec(
                    (ch.c_hidden, ch.c_hidden),
                    xavier(&mut rng, &[ch.c_hidden, ch.c_hidden], ch.c_hidden, ch.c_hidden),
                )
                .expect("gcl shape");
                let tcl2 = TclParams {
                    causal: xavier_filter(&mut rng, ch.c_out, ch.c_hidden, k),
                    align: xavier_filter(&mut rng, ch.c_out, ch.c_hidden, 1),
                };
                BlockParams { tcl1, gcl, tcl2 }
            })
            .collect();
        let c_last = config.blocks.last().expect("validated").c_out;
        let rem = config.remaining_time().expect("validated");
        let head = HeadParams {
            conv: xavier_filter(&mut rng, config.head_channels, c_last, rem),
            linear_w: Array2::from_shape_vec(
                (config.horizon_steps, config.head_channels),
                xavier(
                    &mut rng,
                    &[config.horizon_steps, config.head_channels],
                    config.head_channels,
                    config.horizon_steps,
                ),
            )
            .expect("linear shape"),
            linear_b: Array1::zeros(config.horizon_steps),
        };
        Ok(ModelParams {
            config: config.clone(),
            blocks,
            head,
            rng_seed: seed,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in manifest order with its name and shape.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn filter<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, f: &'a ConvFilter) {
            out.push((
                format!("{name}.weight"),
                f.weights.shape().to_vec(),
                f.weights.as_slice().expect("standard layout"),
            ));
            out.push((format!("{name}.bias"), f.bias.shape().to_vec(), f.bias.as_slice().expect("contiguous")));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            filter(&mut out, &format!("block{b}.tcl1.causal"), &blk.tcl1.causal);
            filter(&mut out, &format!("block{b}.tcl1.align"), &blk.tcl1.align);
            out.push((
                format!("block{b}.gcl.weight"),
                blk.gcl.shape().to_vec(),
                blk.gcl.as_slice().expect("standard layout"),
            ));
            filter(&mut out, &format!("block{b}.tcl2.causal"), &blk.tcl2.causal);
            filter(&mut out, &format!("block{b}.tcl2.align"), &blk.tcl2.align);
        }
        filter(&mut out, "head.conv", &self.head.conv);
        out.push((
            "head.linear.weight".into(),
            self.head.linear_w.shape().to_vec(),
            self.head.linear_w.as_slice().expect("standard layout"),
        ));
        out.push((
            "head.linear.bias".into(),
            self.head.linear_b.shape().to_vec(),
            self.head.linear_b.as_slice().expect("contiguous"),
        ));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn filter<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, f: &'a mut ConvFilter) {
            out.push((format!("{name}.weight"), f.weights.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), f.bias.as_slice_mut().expect("contiguous")));
        }
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            filter(&mut out, &format!("block{b}.tcl1.causal"), &mut blk.tcl1.causal);
            filter(&mut out, &format!("block{b}.tcl1.align"), &mut blk.tcl1.align);
            out.push((format!("block{b}.gcl.weight"), blk.gcl.as_slice_mut().expect("standard layout")));
            filter(&mut out, &format!("block{b}.tcl2.causal"), &mut blk.tcl2.causal);
            filter(&mut out, &format!("block{b}.tcl2.align"), &mut blk.tcl2.align);
        }
        filter(&mut out, "head.conv", &mut self.head.conv);
        out.push(("head.linear.weight".into(), self.head.linear_w.as_slice_mut().expect("standard layout")));
        out.push(("head.linear.bias".into(), self.head.linear_b.as_slice_mut().expect("contiguous")));
        out
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        let mut offset = 0;
        self.tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let e = ParamEntry {
                    name,
                    shape,
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for (_, _, data) in self.tensors() {
            v.extend_from_slice(data);
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return shape_err(format!("flat parameter vector of {} for {n} parameters", flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .filter(|(name, _, _)| name.ends_with(".weight"))
            .flat_map(|(_, _, d)| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_tcl(x: &Tensor3, p: &TclParams) -> Result<()> {
    if p.align.kernel_time() != 1 {
        return shape_err("align filter must be 1x1 in time");
    }
    if p.align.c_in() != p.causal.c_in() || p.align.c_out() != p.causal.c_out() {
        return shape_err(format!(
            "align maps {}->{} but causal conv maps {}->{}",
            p.align.c_in(),
            p.align.c_out(),
            p.causal.c_in(),
            p.causal.c_out()
        ));
    }
    if x.channels() != p.causal.c_in() {
        return shape_err(format!(
            "temporal layer expects {} channels, got {}",
            p.causal.c_in(),
            x.channels()
        ));
    }
    Ok(())
}

/// `relu(crop(align(x)) + causal_conv(x))`.
pub fn tcl_forward(x: &Tensor3, causal: &ConvFilter, align: &ConvFilter) -> Result<Tensor3> {
    let p = TclParams {
        causal: causal.clone(),
        align: align.clone(),
    };
    tcl(x, &p)
}

fn tcl(x: &Tensor3, p: &TclParams) -> Result<Tensor3> {
    check_tcl(x, p)?;
    let mut pre = causal_conv1d(x, &p.causal)?;
    let aligned = causal_conv1d(x, &p.align)?.crop_tail(pre.time_steps())?;
    pre.add_assign(&aligned)?;
    Ok(pre.relu())
}

/// Returns the gradient with respect to the layer input and accumulates
/// filter gradients into `grad`.
fn tcl_backward(x: &Tensor3, p: &TclParams, out: &Tensor3, grad_out: &Tensor3, grad: &mut TclParams) -> Result<Tensor3> {
    let g_pre = relu_backward(out, grad_out);
    let (mut gx, gc) = causal_conv1d_backward(x, &p.causal, &g_pre)?;
    let g_align = crop_tail_backward(&g_pre, x.time_steps());
    let (gx2, ga) = causal_conv1d_backward(x, &p.align, &g_align)?;
    gx.add_assign(&gx2)?;
    grad.causal.weights += &gc.weights;
    grad.causal.bias += &gc.bias;
    grad.align.weights += &ga.weights;
    grad.align.bias += &ga.bias;
    Ok(gx)
}

struct BlockCache {
    input: Tensor3,
    h1: Tensor3,
    g: Tensor3,
    out: Tensor3,
}

fn block_forward(x: &Tensor3, p: &BlockParams, a_hat: &Array2<f64>, index: usize) -> Result<BlockCache> {
    let need = 2 * p.tcl1.causal.kernel_time() - 1;
    if x.time_steps() < need.max(1) {
        return shape_err(format!(
            "block {index}: {} time steps left, kernels need {need}",
            x.time_steps()
        ));
    }
    let named = |e: Error| match e {
        Error::Shape(m) => Error::Shape(format!("block {index}: {m}")),
        other => other,
    };
    let h1 = tcl(x, &p.tcl1).map_err(named)?;
    let g = graph_conv(&h1, a_hat, &p.gcl).map_err(named)?.relu();
    let out = tcl(&g, &p.tcl2).map_err(named)?;
    Ok(BlockCache {
        input: x.clone(),
        h1,
        g,
        out,
    })
}

/// One TCL-GCL-TCL block.
pub fn st_conv_block(x: &Tensor3, p: &BlockParams, a_hat: &Array2<f64>) -> Result<Tensor3> {
    Ok(block_forward(x, p, a_hat, 0)?.out)
}

fn block_backward(c: &BlockCache, p: &BlockParams, a_hat: &Array2<f64>, grad_out: &Tensor3, grad: &mut BlockParams) -> Result<Tensor3> {
    let gg = tcl_backward(&c.g, &p.tcl2, &c.out, grad_out, &mut grad.tcl2)?;
    let gg_pre = relu_backward(&c.g, &gg);
    let (gh1, gw) = graph_conv_backward(&c.h1, a_hat, &p.gcl, &gg_pre)?;
    grad.gcl += &gw;
    tcl_backward(&c.input, &p.tcl1, &c.h1, &gh1, &mut grad.tcl1)
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    head_in: Tensor3,
    head_act: Tensor3,
}

fn check_window(window: &Tensor3, params: &ModelParams, a_hat: &Array2<f64>) -> Result<()> {
    let cfg = &params.config;
    if window.channels() != 1 || window.time_steps() != cfg.history {
        return shape_err(format!(
            "window {:?} does not match history {} with one channel",
            window.dims(),
            cfg.history
        ));
    }
    if a_hat.dim() != (window.nodes(), window.nodes()) {
        return shape_err(format!(
            "propagation matrix {:?} for {} nodes",
            a_hat.dim(),
            window.nodes()
        ));
    }
    Ok(())
}

/// Forecast for one `1 x N x H` window: `N x horizon` in normalized units.
pub fn model_forward(window: &Tensor3, params: &ModelParams, a_hat: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(window, params, a_hat)?.0)
}

pub fn forward_cached(window: &Tensor3, params: &ModelParams, a_hat: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    check_window(window, params, a_hat)?;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut x = window.clone();
    for (b, bp) in params.blocks.iter().enumerate() {
        let c = block_forward(&x, bp, a_hat, b)?;
        x = c.out.clone();
        blocks.push(c);
    }
    let head = &params.head;
    if x.time_steps() != head.conv.kernel_time() {
        return shape_err(format!(
            "head kernel spans {} steps but {} remain",
            head.conv.kernel_time(),
            x.time_steps()
        ));
    }
    let act = causal_conv1d(&x, &head.conv)?.relu();
    let n = act.nodes();
    let horizon = head.linear_w.nrows();
    let mut y = Array2::zeros((n, horizon));
    for node in 0..n {
        for j in 0..horizon {
            let mut acc = head.linear_b[j];
            for c in 0..act.channels() {
                acc += head.linear_w[[j, c]] * act.get(c, node, 0);
            }
            y[[node, j]] = acc;
        }
    }
    Ok((
        y,
        ForwardCache {
            blocks,
            head_in: x,
            head_act: act,
        },
    ))
}

/// Accumulates parameter gradients of `sum(grad_y * y)` into `grad`.
pub fn backward(params: &ModelParams, a_hat: &Array2<f64>, cache: &ForwardCache, grad_y: &Array2<f64>, grad: &mut ModelParams) -> Result<()> {
    let head = &params.head;
    let act = &cache.head_act;
    let (c_head, n, _) = act.dims();
    let horizon = head.linear_w.nrows();
    if grad_y.dim() != (n, horizon) {
        return shape_err(format!("output gradient {:?}, expected {:?}", grad_y.dim(), (n, horizon)));
    }
    let mut g_act = Tensor3::zeros(c_head, n, 1);
    for node in 0..n {
        for j in 0..horizon {
            let gy = grad_y[[node, j]];
            grad.head.linear_b[j] += gy;
            for c in 0..c_head {
                grad.head.linear_w[[j, c]] += gy * act.get(c, node, 0);
                g_act.array_mut()[[c, node, 0]] += head.linear_w[[j, c]] * gy;
            }
        }
    }
    let g_pre = relu_backward(act, &g_act);
    let (mut gx, gconv) = causal_conv1d_backward(&cache.head_in, &head.conv, &g_pre)?;
    grad.head.conv.weights += &gconv.weights;
    grad.head.conv.bias += &gconv.bias;
    for (b, c) in cache.blocks.iter().enumerate().rev() {
        gx = block_backward(c, &params.blocks[b], a_hat, &gx, &mut grad.blocks[b])?;
    }
    Ok(())
}

/// Mean squared error over every window, node and horizon step.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let d = pred - target;
    d.mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Batch-mean MSE and its gradient with respect to all parameters.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    a_hat: &Array2<f64>,
    batch: &[(&Tensor3, &Array2<f64>)],
) -> Result<(f64, ModelParams, Vec<f64>)> {
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(batch.len());
    for (x, target) in batch {
        let (y, cache) = forward_cached(x, params, a_hat)?;
        if y.dim() != target.dim() {
            return shape_err(format!("target {:?} for prediction {:?}", target.dim(), y.dim()));
        }
        let loss = mse(&y, target);
        per_sample.push(loss);
        total += loss;
        let scale = 2.0 / (y.len() as f64 * batch.len() as f64);
        let gy = (&y - *target) * scale;
        backward(params, a_hat, &cache, &gy, &mut grad)?;
    }
    Ok((total / batch.len() as f64, grad, per_sample))
}
