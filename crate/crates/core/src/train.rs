//! Mini-batch Adam training with seeded shuffling and early stopping on validation MSE.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::data::{Window, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grad, model_forward, mse, ModelParams};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 200,
            patience: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, epochs and patience must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} and weight decay {} must be finite and non-negative",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub(crate) fn window_tensor(w: &Window) -> Tensor3 {
    Tensor3::from_matrix(&w.input)
}

/// Mean per-window MSE of `params` over a dataset.
pub fn evaluate_loss(params: &ModelParams, a_hat: &Array2<f64>, data: &WindowedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Split(format!("{:?} split has no windows", data.split)));
    }
    let mut total = 0.0;
    for w in &data.windows {
        let y = model_forward(&window_tensor(w), params, a_hat)?;
        total += mse(&y, &w.target);
    }
    Ok(total / data.len() as f64)
}

/// Normalized-unit forecasts for every window.
pub fn predict(params: &ModelParams, a_hat: &Array2<f64>, windows: &[Window]) -> Result<Vec<Array2<f64>>> {
    windows
        .iter()
        .map(|w| model_forward(&window_tensor(w), params, a_hat))
        .collect()
}

pub fn train(
    init: ModelParams,
    a_hat: &Array2<f64>,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Split("training split has no windows".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Split("validation split has no windows".into()));
    }
    let inputs: Vec<Tensor3> = train_set.windows.iter().map(window_tensor).collect();
    let manifest = init.manifest();
    let mut params = init;
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len(), cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut sample_loss = vec![0.0; train_set.len()];

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor3, &Array2<f64>)> = chunk
                .iter()
                .map(|&i| (&inputs[i], &train_set.windows[i].target))
                .collect();
            let (loss, grad, per_sample) = batch_loss_and_grad(&params, a_hat, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            for (&i, l) in chunk.iter().zip(per_sample) {
                sample_loss[i] = l;
            }
            adam_step(&mut flat, &grad.flatten(), &manifest, &mut state).map_err(|e| match e {
                Error::NonFiniteGradient { param } => {
                    Error::Training(format!("non-finite gradient in `{param}` at epoch {epoch}, batch {b}"))
                }
                other => other,
            })?;
            params.assign_flat(&flat)?;
        }
        // Summed in sample order so the value does not depend on the shuffle.
        let train_loss = sample_loss.iter().sum::<f64>() / sample_loss.len() as f64;
        let val_loss = evaluate_loss(&params, a_hat, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.1 {
            best = (params.clone(), val_loss, epoch);
        } else if epoch - best.2 >= cfg.patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", best.2);
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        history,
        best_epoch: best.2,
        best_val_loss: best.1,
    })
}

/// `epoch,train_loss,val_loss` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,train_loss,val_loss").map_err(io)?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.train_loss, h.val_loss).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{windows_in_range, Split};
    use crate::model::{BlockChannels, ModelConfig};
    use crate::pruning::normalize_adjacency;

    fn tiny() -> ModelConfig {
        ModelConfig {
            blocks: vec![BlockChannels {
                c_in: 1,
                c_hidden: 4,
                c_out: 4,
            }],
            kernel_time: 2,
            history: 6,
            horizon_steps: 2,
            head_channels: 4,
            n_nodes: 3,
        }
    }

    fn series(n: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, t), |(i, s)| ((s as f64) * 0.4 + i as f64).sin())
    }

    fn a_hat() -> Array2<f64> {
        let a = ndarray::array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        normalize_adjacency(&a)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let v = series(3, 60);
        let tr = windows_in_range(&v, 0..40, 6, 2, Split::Train).unwrap();
        let va = windows_in_range(&v, 40..60, 6, 2, Split::Val).unwrap();
        let init = ModelParams::init(&tiny(), 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 4,
            patience: 10,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(init.clone(), &a_hat(), &tr, &va, &cfg).unwrap();
        assert_eq!(out.params, init);
        let first = out.history[0].train_loss;
        assert!(out.history.iter().all(|h| h.train_loss == first));
    }

    #[test]
    fn memorizes_a_single_sample() {
        let v = series(3, 8);
        let tr = windows_in_range(&v, 0..8, 6, 2, Split::Train).unwrap();
        assert_eq!(tr.len(), 1);
        let cfg = TrainConfig {
            lr: 0.01,
            weight_decay: 0.0,
            max_epochs: 500,
            patience: 500,
            batch_size: 1,
            seed: 42,
        };
        let init = ModelParams::init(&tiny(), 42).unwrap();
        let out = train(init, &a_hat(), &tr, &tr.clone(), &cfg).unwrap();
        let final_loss = evaluate_loss(&out.params, &a_hat(), &tr).unwrap();
        assert!(final_loss < 1e-3, "final loss {final_loss}");
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let v = series(3, 80);
        let tr = windows_in_range(&v, 0..56, 6, 2, Split::Train).unwrap();
        let va = windows_in_range(&v, 56..80, 6, 2, Split::Val).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || train(ModelParams::init(&tiny(), 42).unwrap(), &a_hat(), &tr, &va, &cfg).unwrap();
        let (a, b) = (run(), run());
        let bits = |h: &[EpochLoss]| -> Vec<(u64, u64)> {
            h.iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let v = series(3, 80);
        let tr = windows_in_range(&v, 0..56, 6, 2, Split::Train).unwrap();
        let va = windows_in_range(&v, 56..80, 6, 2, Split::Val).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 40,
            patience: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(ModelParams::init(&tiny(), 7).unwrap(), &a_hat(), &tr, &va, &cfg).unwrap();
        let min_val = out.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min_val);
        let reval = evaluate_loss(&out.params, &a_hat(), &va).unwrap();
        assert!(reval <= min_val);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let v = series(3, 60);
        let tr = windows_in_range(&v, 0..40, 6, 2, Split::Train).unwrap();
        let empty = WindowedDataset {
            split: Split::Val,
            history: 6,
            horizon: 2,
            windows: vec![],
        };
        let init = ModelParams::init(&tiny(), 1).unwrap();
        assert!(train(init, &a_hat(), &tr, &empty, &TrainConfig::default()).is_err());
    }
}
