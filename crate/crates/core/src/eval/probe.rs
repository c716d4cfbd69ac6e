//! Linear probes: multinomial logistic regression fit by L-BFGS.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Fewest rows a probe accepts.
pub const MIN_PROBE_ROWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Inverse L2 strength: the objective is `Σ CE + ‖W‖² / (2C)`.
    pub c: f64,
    pub max_iter: usize,
    pub train_fraction: f64,
    /// Stop when every gradient entry of the per-sample objective is below this.
    pub tol: f64,
    /// Standardise features with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c: 1.0,
            max_iter: 1000,
            train_fraction: 0.7,
            tol: 1e-4,
            standardize: true,
        }
    }
}

/// Held-out accuracy of a linear probe predicting `labels` from `codes`.
pub fn d_score(codes: &Tensor<f64>, labels: &[u32], split_seed: u64) -> Result<f64> {
    d_score_with(codes, labels, split_seed, &ProbeConfig::default())
}

pub fn d_score_with(codes: &Tensor<f64>, labels: &[u32], split_seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    ensure!(
        codes.shape.len() == 2 && codes.rows() == labels.len(),
        Error::shape(format!("codes {:?} vs {} labels", codes.shape, labels.len()))
    );
    let n = labels.len();
    ensure!(
        n >= MIN_PROBE_ROWS,
        Error::Metric(format!("a probe needs at least {MIN_PROBE_ROWS} rows, got {n}"))
    );
    ensure!(codes.all_finite(), Error::Metric("codes contain non-finite values".into()));
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    ensure!(
        classes.len() >= 2,
        Error::Metric("labels hold a single class; predictivity is undefined".into())
    );
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(split_seed, stream::PROBE, 0)));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let d = codes.row_len();
    let (mut mu, mut sd) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for &i in train {
            for (m, &v) in mu.iter_mut().zip(codes.row(i)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n_train as f64);
        let mut var = vec![0.0; d];
        for &i in train {
            for ((s, &v), m) in var.iter_mut().zip(codes.row(i)).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
        for (s, v) in sd.iter_mut().zip(var) {
            let std = (v / n_train as f64).sqrt();
            *s = if std > 1e-12 { std } else { 1.0 };
        }
    }
    let features = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| codes.row(i).iter().zip(&mu).zip(&sd).map(|((v, m), s)| (v - m) / s))
            .collect()
    };
    let xtr = features(train);
    let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let model = LogReg::fit(&xtr, &ytr, d, classes.len(), cfg);
    let xte = features(test);
    let correct = test
        .iter()
        .enumerate()
        .filter(|&(r, &i)| model.predict(&xte[r * d..(r + 1) * d]) == y[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Weights `[(d + 1) × K]`, the last row holding the (unregularised) bias.
struct LogReg {
    w: Vec<f64>,
    d: usize,
    k: usize,
}

impl LogReg {
    fn logits(w: &[f64], x: &[f64], d: usize, k: usize, out: &mut [f64]) {
        out.copy_from_slice(&w[d * k..(d + 1) * k]);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, &wj) in out.iter_mut().zip(&w[j * k..(j + 1) * k]) {
                    *o += xj * wj;
                }
            }
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.k];
        Self::logits(&self.w, x, self.d, self.k, &mut z);
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        best
    }

    /// Per-sample objective and its gradient.
    fn objective(w: &[f64], x: &[f64], y: &[usize], d: usize, k: usize, c: f64, grad: &mut [f64]) -> f64 {
        let n = y.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for (r, &yr) in y.iter().enumerate() {
            let xr = &x[r * d..(r + 1) * d];
            Self::logits(w, xr, d, k, &mut z);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            loss += s.ln() + m - (z[yr].ln() + m);
            for v in z.iter_mut() {
                *v /= s;
            }
            z[yr] -= 1.0;
            for (j, &xj) in xr.iter().enumerate() {
                for (g, &p) in grad[j * k..(j + 1) * k].iter_mut().zip(&z) {
                    *g += xj * p;
                }
            }
            for (g, &p) in grad[d * k..].iter_mut().zip(&z) {
                *g += p;
            }
        }
        let mut reg = 0.0;
        for (g, &wv) in grad[..d * k].iter_mut().zip(&w[..d * k]) {
            reg += wv * wv;
            *g += wv / c;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss + 0.5 * reg / c) / n
    }

    fn fit(x: &[f64], y: &[usize], d: usize, k: usize, cfg: &ProbeConfig) -> LogReg {
        let dim = (d + 1) * k;
        let f = |w: &[f64], g: &mut [f64]| Self::objective(w, x, y, d, k, cfg.c, g);
        let w = lbfgs(vec![0.0; dim], f, cfg.max_iter, cfg.tol);
        LogReg { w, d, k }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with a backtracking Armijo line search.
fn lbfgs(mut w: Vec<f64>, mut f: impl FnMut(&[f64], &mut [f64]) -> f64, max_iter: usize, tol: f64) -> Vec<f64> {
    const MEMORY: usize = 10;
    let dim = w.len();
    let mut g = vec![0.0; dim];
    let mut fx = f(&w, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(MEMORY);
    let mut g_new = vec![0.0; dim];
    let mut w_new = vec![0.0; dim];
    for it in 0..max_iter {
        if g.iter().all(|v| v.abs() <= tol) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alpha = vec![0.0; hist.len()];
        for (i, (s, yv, rho)) in hist.iter().enumerate().rev() {
            alpha[i] = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= alpha[i] * yi);
        }
        let gamma = hist.last().map_or_else(
            || 1.0 / dot(&g, &g).sqrt().max(1e-12),
            |(s, yv, _)| dot(s, yv) / dot(yv, yv),
        );
        q.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, yv, rho)) in hist.iter().enumerate() {
            let beta = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (alpha[i] - beta) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            hist.clear();
            let scale = 1.0 / dot(&g, &g).sqrt().max(1e-12);
            dir = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            for ((wn, &wi), &di) in w_new.iter_mut().zip(&w).zip(&dir) {
                *wn = wi + step * di;
            }
            let f_new = f(&w_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 {
                    if hist.len() == MEMORY {
                        hist.remove(0);
                    }
                    hist.push((s, yv, 1.0 / sy));
                }
                let decrease = fx - f_new;
                std::mem::swap(&mut w, &mut w_new);
                std::mem::swap(&mut g, &mut g_new);
                fx = f_new;
                accepted = true;
                if decrease <= 1e-15 * fx.abs().max(1.0) && it > 0 {
                    return w;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    w
}
