//! Direct transcription of the binning, entropy, correlation, score,
//! threshold and outer-layer formulas, written without reference to the
//! library implementation.

#![allow(dead_code)]

pub fn bins(x: &[f64], b: usize) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; b];
    for &v in x {
        let k = if hi == lo {
            0
        } else {
            (((v - lo) / ((hi - lo) / b as f64)).floor() as usize).min(b - 1)
        };
        p[k] += 1.0 / x.len() as f64;
    }
    p
}

pub fn entropy(p: &[f64], eps: f64) -> f64 {
    let mut h = 0.0;
    for &q in p {
        h -= q * (q + eps).ln();
    }
    h
}

pub fn pearson(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return 0.0;
    }
    let t = x.len() as f64;
    let mx = x.iter().sum::<f64>() / t;
    let my = y.iter().sum::<f64>() / t;
    let mut num = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for k in 0..x.len() {
        num += (x[k] - mx) * (y[k] - my);
        sxx += (x[k] - mx) * (x[k] - mx);
        syy += (y[k] - my) * (y[k] - my);
    }
    (num / (sxx.sqrt() * syy.sqrt() + eps)).abs()
}

/// `s[i][j] = 1[a_ij > 0] * r_ij * (H_i + H_j) / 2`.
pub fn scores(a: &[Vec<f64>], x: &[Vec<f64>], b: usize, eps: f64) -> Vec<Vec<f64>> {
    let n = a.len();
    let h: Vec<f64> = x.iter().map(|s| entropy(&bins(s, b), eps)).collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if a[i][j] > 0.0 {
                s[i][j] = pearson(&x[i], &x[j], eps) * (h[i] + h[j]) / 2.0;
            }
        }
    }
    s
}

pub enum Mode {
    Tau(f64),
    Quantile(f64),
    TopK(usize),
}

/// Binary kept-edge matrix; `None` when the quantile has no positive scores.
pub fn threshold(a: &[Vec<f64>], s: &[Vec<f64>], mode: &Mode) -> Option<Vec<Vec<u8>>> {
    let n = a.len();
    let mut m = vec![vec![0u8; n]; n];
    let tau = match *mode {
        Mode::Tau(t) => Some(t),
        Mode::Quantile(q) => {
            let mut pos = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if a[i][j] > 0.0 && s[i][j] > 0.0 {
                        pos.push(s[i][j]);
                    }
                }
            }
            if pos.is_empty() {
                return None;
            }
            pos.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let rank = ((q * pos.len() as f64).ceil() as usize).max(1);
            Some(pos[rank - 1])
        }
        Mode::TopK(_) => None,
    };
    if let Some(t) = tau {
        for i in 0..n {
            for j in 0..n {
                if a[i][j] > 0.0 && s[i][j] >= t {
                    m[i][j] = 1;
                }
            }
        }
        return Some(m);
    }
    let Mode::TopK(k) = *mode else { unreachable!() };
    for i in 0..n {
        let mut nb: Vec<usize> = (0..n).filter(|&j| a[i][j] > 0.0).collect();
        // Highest score first, lower index on ties.
        nb.sort_by(|&p, &q| s[i][q].partial_cmp(&s[i][p]).unwrap().then(p.cmp(&q)));
        for &j in nb.iter().take(k) {
            m[i][j] = 1;
        }
    }
    let symmetric = (0..n).all(|i| (0..n).all(|j| a[i][j] == a[j][i]));
    if symmetric {
        for i in 0..n {
            for j in 0..n {
                if m[i][j] == 1 {
                    m[j][i] = 1;
                }
            }
        }
    }
    Some(m)
}

pub fn outer(m: &[Vec<u8>], d_min: usize) -> Vec<usize> {
    (0..m.len())
        .filter(|&i| m[i].iter().map(|&v| v as usize).sum::<usize>() <= d_min)
        .collect()
}
