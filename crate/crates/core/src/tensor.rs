//! Dense kernels for the forecaster: valid causal convolution along time,
//! first-order graph convolution, and their exact gradients.
//!
//! Activations are `(channels, nodes, time)` tensors in standard layout.
//! All kernels walk the raw slices directly.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A `(channels, nodes, time_steps)` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3(Array3<f64>);

impl Tensor3 {
    pub fn zeros(channels: usize, nodes: usize, time_steps: usize) -> Self {
        Tensor3(Array3::zeros((channels, nodes, time_steps)))
    }

    pub fn from_array(a: Array3<f64>) -> Self {
        // Kernels index the backing slice, so force standard layout.
        if a.is_standard_layout() {
            Tensor3(a)
        } else {
            Tensor3(a.as_standard_layout().into_owned())
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        match Array3::from_shape_vec(dims, data) {
            Ok(a) => Ok(Tensor3(a)),
            Err(e) => shape_err(format!("tensor {dims:?}: {e}")),
        }
    }

    /// Single-channel tensor from an `nodes x time` matrix.
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (n, t) = m.dim();
        let a = m
            .to_owned()
            .into_shape_with_order((1, n, t))
            .expect("matrix reshape to one channel");
        Tensor3::from_array(a)
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn nodes(&self) -> usize {
        self.0.dim().1
    }

    pub fn time_steps(&self) -> usize {
        self.0.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.0.as_slice_mut().expect("standard layout")
    }

    pub fn get(&self, c: usize, n: usize, t: usize) -> f64 {
        self.0[[c, n, t]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn relu(&self) -> Tensor3 {
        Tensor3(self.0.mapv(|v| v.max(0.0)))
    }

    /// Keeps the last `len` time steps.
    pub fn crop_tail(&self, len: usize) -> Result<Tensor3> {
        let (c, n, t) = self.dims();
        if len > t {
            return shape_err(format!("cannot crop {t} time steps to {len}"));
        }
        let src = self.as_slice();
        let mut out = Tensor3::zeros(c, n, len);
        let dst = out.as_mut_slice();
        let skip = t - len;
        for row in 0..c * n {
            dst[row * len..(row + 1) * len]
                .copy_from_slice(&src[row * t + skip..(row + 1) * t]);
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        if self.dims() != other.dims() {
            return shape_err(format!(
                "elementwise add of {:?} and {:?}",
                self.dims(),
                other.dims()
            ));
        }
        self.0 += &other.0;
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Tensor3 {
        Tensor3(&self.0 * alpha)
    }
}

/// Temporal filter with weights `(c_out, c_in, kernel_time)` and one bias per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvFilter {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

impl ConvFilter {
    pub fn zeros(c_out: usize, c_in: usize, kernel_time: usize) -> Self {
        ConvFilter {
            weights: Array3::zeros((c_out, c_in, kernel_time)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn new(weights: Array3<f64>, bias: Array1<f64>) -> Result<Self> {
        let (c_out, _, k) = weights.dim();
        if k == 0 {
            return shape_err("kernel_time must be at least 1");
        }
        if bias.len() != c_out {
            return shape_err(format!("bias length {} != c_out {c_out}", bias.len()));
        }
        Ok(ConvFilter {
            weights: weights.as_standard_layout().into_owned(),
            bias,
        })
    }

    /// 1x1 filter copying channels through unchanged.
    pub fn identity(channels: usize) -> Self {
        let mut f = ConvFilter::zeros(channels, channels, 1);
        for c in 0..channels {
            f.weights[[c, c, 0]] = 1.0;
        }
        f
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn kernel_time(&self) -> usize {
        self.weights.dim().2
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn w(&self) -> &[f64] {
        self.weights.as_slice().expect("standard layout")
    }
}

/// Gradients of a filter, same shapes as the filter.
pub type ConvFilterGrad = ConvFilter;

fn check_conv(x: &Tensor3, f: &ConvFilter) -> Result<()> {
    if x.channels() != f.c_in() {
        return shape_err(format!(
            "causal conv expects {} input channels, got {}",
            f.c_in(),
            x.channels()
        ));
    }
    if f.kernel_time() == 0 {
        return shape_err("kernel_time must be at least 1");
    }
    if x.time_steps() < f.kernel_time() {
        return shape_err(format!(
            "kernel of {} steps longer than series of {}",
            f.kernel_time(),
            x.time_steps()
        ));
    }
    Ok(())
}

/// Valid causal convolution along time, applied to every node independently:
/// `out[o,n,t] = bias[o] + sum_{i,k} w[o,i,k] * x[i,n,t+k]`.
pub fn causal_conv1d(x: &Tensor3, f: &ConvFilter) -> Result<Tensor3> {
    check_conv(x, f)?;
    let (c_in, nodes, t_in) = x.dims();
    let c_out = f.c_out();
    let k_t = f.kernel_time();
    let t_out = t_in - k_t + 1;
    let xs = x.as_slice();
    let ws = f.w();
    let mut out = Tensor3::zeros(c_out, nodes, t_out);
    let os = out.as_mut_slice();
    for o in 0..c_out {
        let b = f.bias[o];
        for n in 0..nodes {
            let orow = &mut os[(o * nodes + n) * t_out..(o * nodes + n + 1) * t_out];
            orow.fill(b);
            for i in 0..c_in {
                let xrow = &xs[(i * nodes + n) * t_in..(i * nodes + n + 1) * t_in];
                let wrow = &ws[(o * c_in + i) * k_t..(o * c_in + i + 1) * k_t];
                for (k, &w) in wrow.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (ov, xv) in orow.iter_mut().zip(&xrow[k..k + t_out]) {
                        *ov += w * xv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * causal_conv1d(x, f))` with respect to `x` and `f`.
pub fn causal_conv1d_backward(
    x: &Tensor3,
    f: &ConvFilter,
    grad_out: &Tensor3,
) -> Result<(Tensor3, ConvFilterGrad)> {
    check_conv(x, f)?;
    let (c_in, nodes, t_in) = x.dims();
    let c_out = f.c_out();
    let k_t = f.kernel_time();
    let t_out = t_in - k_t + 1;
    if grad_out.dims() != (c_out, nodes, t_out) {
        return shape_err(format!(
            "causal conv grad_out {:?} does not match output {:?}",
            grad_out.dims(),
            (c_out, nodes, t_out)
        ));
    }
    let xs = x.as_slice();
    let gs = grad_out.as_slice();
    let ws = f.w();
    let mut gx = Tensor3::zeros(c_in, nodes, t_in);
    let mut gf = ConvFilter::zeros(c_out, c_in, k_t);
    {
        let gxs = gx.as_mut_slice();
        let gws = gf.weights.as_slice_mut().expect("standard layout");
        for o in 0..c_out {
            let mut bsum = 0.0;
            for n in 0..nodes {
                let grow = &gs[(o * nodes + n) * t_out..(o * nodes + n + 1) * t_out];
                bsum += grow.iter().sum::<f64>();
                for i in 0..c_in {
                    let base = (i * nodes + n) * t_in;
                    for k in 0..k_t {
                        let w = ws[(o * c_in + i) * k_t + k];
                        let xrow = &xs[base + k..base + k + t_out];
                        let mut acc = 0.0;
                        for (g, xv) in grow.iter().zip(xrow) {
                            acc += g * xv;
                        }
                        gws[(o * c_in + i) * k_t + k] += acc;
                        if w != 0.0 {
                            let gxrow = &mut gxs[base + k..base + k + t_out];
                            for (gxv, g) in gxrow.iter_mut().zip(grow) {
                                *gxv += w * g;
                            }
                        }
                    }
                }
            }
            gf.bias[o] = bsum;
        }
    }
    Ok((gx, gf))
}

fn check_graph_conv(x: &Tensor3, a_hat: &Array2<f64>, w: &Array2<f64>) -> Result<()> {
    let n = x.nodes();
    if a_hat.dim() != (n, n) {
        return shape_err(format!(
            "propagation matrix {:?} does not match {n} nodes",
            a_hat.dim()
        ));
    }
    if w.dim().0 != x.channels() {
        return shape_err(format!(
            "graph conv weight expects {} input channels, got {}",
            w.dim().0,
            x.channels()
        ));
    }
    Ok(())
}

/// Neighbour aggregation `z[i,n,t] = sum_m a_hat[n,m] * x[i,m,t]`. Zero entries are skipped.
fn propagate(x: &Tensor3, a_hat: &Array2<f64>, transpose: bool) -> Tensor3 {
    let (c, nodes, t) = x.dims();
    let xs = x.as_slice();
    let mut z = Tensor3::zeros(c, nodes, t);
    let zs = z.as_mut_slice();
    for n in 0..nodes {
        for m in 0..nodes {
            let a = if transpose { a_hat[[m, n]] } else { a_hat[[n, m]] };
            if a == 0.0 {
                continue;
            }
            for i in 0..c {
                let src = &xs[(i * nodes + m) * t..(i * nodes + m + 1) * t];
                let dst = &mut zs[(i * nodes + n) * t..(i * nodes + n + 1) * t];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }
    z
}

/// Mixes channels through `w` (`c_in x c_out`), producing a new tensor with `c_out` channels.
fn mix_channels(z: &Tensor3, w: &Array2<f64>) -> Tensor3 {
    let (c_in, nodes, t) = z.dims();
    let c_out = w.dim().1;
    let zs = z.as_slice();
    let row = nodes * t;
    let mut out = Tensor3::zeros(c_out, nodes, t);
    let os = out.as_mut_slice();
    for i in 0..c_in {
        let src = &zs[i * row..(i + 1) * row];
        for o in 0..c_out {
            let wv = w[[i, o]];
            if wv == 0.0 {
                continue;
            }
            let dst = &mut os[o * row..(o + 1) * row];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    out
}

/// First-order graph convolution: at every time step node `n` receives
/// `sum_m a_hat[n,m] * x[:,m,t]` mixed across channels by `w` (`c_in x c_out`).
pub fn graph_conv(x: &Tensor3, a_hat: &Array2<f64>, w: &Array2<f64>) -> Result<Tensor3> {
    check_graph_conv(x, a_hat, w)?;
    Ok(mix_channels(&propagate(x, a_hat, false), w))
}

/// Gradients of `sum(grad_out * graph_conv(x, a_hat, w))` for `x` and `w`; `a_hat` is constant.
pub fn graph_conv_backward(
    x: &Tensor3,
    a_hat: &Array2<f64>,
    w: &Array2<f64>,
    grad_out: &Tensor3,
) -> Result<(Tensor3, Array2<f64>)> {
    check_graph_conv(x, a_hat, w)?;
    let (c_in, nodes, t) = x.dims();
    let c_out = w.dim().1;
    if grad_out.dims() != (c_out, nodes, t) {
        return shape_err(format!(
            "graph conv grad_out {:?} does not match output {:?}",
            grad_out.dims(),
            (c_out, nodes, t)
        ));
    }
    let z = propagate(x, a_hat, false);
    let zs = z.as_slice();
    let gs = grad_out.as_slice();
    let row = nodes * t;
    let mut gw = Array2::zeros((c_in, c_out));
    for i in 0..c_in {
        let zrow = &zs[i * row..(i + 1) * row];
        for o in 0..c_out {
            let grow = &gs[o * row..(o + 1) * row];
            gw[[i, o]] = zrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        }
    }
    let gz = mix_channels(grad_out, &w.t().to_owned());
    let gx = propagate(&gz, a_hat, true);
    Ok((gx, gw))
}

/// Gradient through an elementwise ReLU given its output.
pub fn relu_backward(activated: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    let mut g = grad_out.clone();
    for (gv, a) in g.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        if *a <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Gradient of `crop_tail` mapped back onto the uncropped time axis.
pub fn crop_tail_backward(grad: &Tensor3, full_time: usize) -> Tensor3 {
    let (c, n, len) = grad.dims();
    let mut out = Tensor3::zeros(c, n, full_time);
    let skip = full_time - len;
    let src = grad.as_slice();
    let dst = out.as_mut_slice();
    for row in 0..c * n {
        dst[row * full_time + skip..(row + 1) * full_time]
            .copy_from_slice(&src[row * len..(row + 1) * len]);
    }
    out
}
