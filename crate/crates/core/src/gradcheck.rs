//! Central finite-difference check of the analytic model gradient.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{batch_loss_and_grad, ModelParams};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the batch MSE against central differences
/// with step `h` at up to `per_tensor` seeded coordinates of every parameter tensor.
pub fn check_gradients(
    params: &ModelParams,
    a_hat: &Array2<f64>,
    batch: &[(&Tensor3, &Array2<f64>)],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    let (_, grad, _) = batch_loss_and_grad(params, a_hat, batch)?;
    let analytic: Vec<(String, Vec<f64>)> = grad
        .tensors()
        .into_iter()
        .map(|(name, _, v)| (name, v.to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (t, (name, g)) in analytic.iter().enumerate() {
        let picks = sample(&mut rng, g.len(), per_tensor.min(g.len())).into_vec();
        for i in picks {
            let orig = params.tensors()[t].2[i];
            let mut loss_at = |v: f64| -> Result<f64> {
                probe.tensors_mut()[t].1[i] = v;
                Ok(batch_loss_and_grad(&probe, a_hat, batch)?.0)
            };
            let numeric = (loss_at(orig + h)? - loss_at(orig - h)?) / (2.0 * h);
            loss_at(orig)?;
            out.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: g[i],
                numeric,
                rel_error: relative_error(g[i], numeric, 1e-6),
            });
        }
    }
    Ok(out)
}
