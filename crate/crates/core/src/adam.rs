//! Adam with L2 regularization folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name, shape and location of one tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Maps a flat index back to the parameter it belongs to.
pub fn param_name(manifest: &[ParamEntry], index: usize) -> String {
    manifest
        .iter()
        .find(|e| index >= e.offset && index < e.offset + e.len)
        .map(|e| format!("{}[{}]", e.name, index - e.offset))
        .unwrap_or_else(|| format!("#{index}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        }
    }
}

/// One Adam update in place. The gradient is checked for non-finite entries
/// before anything is modified.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    manifest: &[ParamEntry],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam step over {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: param_name(manifest, bad),
        });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let g = g + weight_decay * *p;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(len: usize) -> Vec<ParamEntry> {
        vec![ParamEntry {
            name: "w".into(),
            shape: vec![len],
            offset: 0,
            len,
        }]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let mut st = AdamState::new(3, cfg);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &manifest(3), &mut st).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
        assert!(st.first_moment.iter().chain(&st.second_moment).all(|&m| m == 0.0));
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_full_learning_rate() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0];
        let mut st = AdamState::new(1, cfg);
        adam_step(&mut p, &[1.0], &manifest(1), &mut st).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![0.7, 0.7];
        let mut st = AdamState::new(2, AdamConfig::default());
        for i in 0..50 {
            let g = (i as f64 * 0.37).sin();
            adam_step(&mut p, &[g, g], &manifest(2), &mut st).unwrap();
            assert_eq!(p[0].to_bits(), p[1].to_bits());
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1, -0.4, 2.0];
            let mut st = AdamState::new(3, AdamConfig::default());
            for i in 0..20 {
                let g = [i as f64 * 0.1, -0.3, (i as f64).cos()];
                adam_step(&mut p, &g, &manifest(3), &mut st).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let m = vec![
            ParamEntry {
                name: "a".into(),
                shape: vec![2],
                offset: 0,
                len: 2,
            },
            ParamEntry {
                name: "b.weight".into(),
                shape: vec![2],
                offset: 2,
                len: 2,
            },
        ];
        let mut p = vec![0.0; 4];
        let mut st = AdamState::new(4, AdamConfig::default());
        let err = adam_step(&mut p, &[0.0, 0.0, 0.0, f64::NAN], &m, &mut st).unwrap_err();
        match err {
            Error::NonFiniteGradient { param } => assert_eq!(param, "b.weight[1]"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(st.step_count, 0);
    }
}
