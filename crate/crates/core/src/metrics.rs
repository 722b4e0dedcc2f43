//! Forecast accuracy metrics and the historical-average baseline.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truth values with magnitude below this are left out of MAPE.
pub const MAPE_ZERO_CUTOFF: f64 = 1e-6;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} truth values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("no values to score".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let ms = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(ms.sqrt())
}

/// Percent error, averaged over entries whose truth is not (near) zero.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let (sum, count) = pred
        .iter()
        .zip(truth)
        .filter(|(_, t)| t.abs() >= MAPE_ZERO_CUTOFF)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + ((p - t) / t).abs(), c + 1));
    if count == 0 {
        return Err(Error::Metric("every truth value is zero; MAPE undefined".into()));
    }
    Ok(100.0 * sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
        Ok(Metrics {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            mape: mape(pred, truth)?,
        })
    }

    /// Over every window, node and step of matching `N x horizon` blocks.
    pub fn over_windows(pred: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<Metrics> {
        let (p, t) = flatten_pair(pred, truth, None)?;
        Metrics::compute(&p, &t)
    }

    /// One entry per node; MAPE is NaN for a node whose truth is all zero.
    pub fn per_node(pred: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<Vec<Metrics>> {
        let n = pred.first().map(|a| a.nrows()).unwrap_or(0);
        (0..n)
            .map(|node| {
                let (p, t) = flatten_pair(pred, truth, Some(node))?;
                Ok(Metrics {
                    mae: mae(&p, &t)?,
                    rmse: rmse(&p, &t)?,
                    mape: mape(&p, &t).unwrap_or(f64::NAN),
                })
            })
            .collect()
    }
}

fn flatten_pair(pred: &[Array2<f64>], truth: &[Array2<f64>], node: Option<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} forecasts for {} targets", pred.len(), truth.len())));
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in pred.iter().zip(truth) {
        if a.dim() != b.dim() {
            return Err(Error::Metric(format!("forecast {:?} vs target {:?}", a.dim(), b.dim())));
        }
        match node {
            Some(n) => {
                p.extend(a.row(n).iter());
                t.extend(b.row(n).iter());
            }
            None => {
                p.extend(a.iter());
                t.extend(b.iter());
            }
        }
    }
    Ok((p, t))
}

/// Per-node, per-time-of-day means of the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    /// `N x slots`; one slot (the global mean) when the interval does not divide a day.
    slot_means: Array2<f64>,
}

impl HistoricalAverage {
    /// `raw` holds original-unit values; only columns in `train` are read.
    pub fn fit(raw: &Array2<f64>, train: Range<usize>, sampling_interval_minutes: f64) -> Result<Self> {
        if train.is_empty() || train.end > raw.ncols() {
            return Err(Error::Metric(format!("bad training range {train:?}")));
        }
        let per_day = 1440.0 / sampling_interval_minutes;
        let slots = if per_day >= 1.0 && (per_day - per_day.round()).abs() < 1e-9 {
            per_day.round() as usize
        } else {
            1
        };
        let n = raw.nrows();
        let mut sum = Array2::<f64>::zeros((n, slots));
        let mut count = vec![0usize; slots];
        for t in train.clone() {
            let s = t % slots;
            count[s] += 1;
            for i in 0..n {
                sum[[i, s]] += raw[[i, t]];
            }
        }
        let len = train.len() as f64;
        let global: Vec<f64> = (0..n).map(|i| sum.row(i).sum() / len).collect();
        let slot_means = Array2::from_shape_fn((n, slots), |(i, s)| {
            if count[s] > 0 {
                sum[[i, s]] / count[s] as f64
            } else {
                global[i]
            }
        });
        Ok(HistoricalAverage { slot_means })
    }

    pub fn slots(&self) -> usize {
        self.slot_means.ncols()
    }

    /// Forecast for absolute time indices `steps`.
    pub fn predict(&self, steps: Range<usize>) -> Array2<f64> {
        let n = self.slot_means.nrows();
        let slots = self.slots();
        let len = steps.len();
        Array2::from_shape_fn((n, len), |(i, k)| self.slot_means[[i, (steps.start + k) % slots]])
    }
}

/// Historical-average forecasts for windows whose targets start at the given absolute indices.
pub fn historical_average_baseline(
    raw: &Array2<f64>,
    train: Range<usize>,
    sampling_interval_minutes: f64,
    target_ranges: &[Range<usize>],
) -> Result<Vec<Array2<f64>>> {
    let ha = HistoricalAverage::fit(raw, train, sampling_interval_minutes)?;
    Ok(target_ranges.iter().map(|r| ha.predict(r.clone())).collect())
}
