//! Gaussian mixture clustering of latent codes.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

pub const EM_ITERATIONS: usize = 100;
const KMEANS_ITERATIONS: usize = 100;
/// Added to every covariance diagonal.
const REG_COVAR: f64 = 1e-6;
/// A component whose total responsibility falls below this has collapsed.
const MIN_WEIGHT: f64 = 1e-8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Covariance {
    Full,
    Diagonal,
}

/// Cluster rows of `codes` into `k` groups with a full-covariance GMM fit by
/// EM from a k-means++ start. Falls back to diagonal covariances if a
/// component degenerates. Rows are processed in a canonical order, so
/// permuting the input permutes the assignments identically.
pub fn gmm_cluster(codes: &Tensor<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        codes.shape.len() == 2,
        Error::shape(format!("codes must be [N, d], got {:?}", codes.shape))
    );
    ensure!(k >= 1, Error::Metric("cluster count must be at least 1".into()));
    let n = codes.rows();
    ensure!(
        n >= 10 * k,
        Error::Metric(format!("{n} rows are too few for {k} clusters (need at least {})", 10 * k))
    );
    ensure!(codes.all_finite(), Error::Metric("codes contain non-finite values".into()));
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let d = codes.row_len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        codes
            .row(a)
            .iter()
            .zip(codes.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let x: Vec<DVector<f64>> = order.iter().map(|&i| DVector::from_column_slice(codes.row(i))).collect();
    let init = kmeans(&x, k, d, seed);
    let labels = match em(&x, &init, k, d, Covariance::Full) {
        Some(l) => l,
        None => em(&x, &init, k, d, Covariance::Diagonal).ok_or_else(|| {
            Error::Metric("mixture fit degenerated with full and diagonal covariances".into())
        })?,
    };
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = labels[pos];
    }
    Ok(out)
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// k-means++ seeding followed by Lloyd iterations; returns hard labels.
fn kmeans(x: &[DVector<f64>], k: usize, d: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(rng::derive(seed, stream::GMM, 0));
    let n = x.len();
    let mut centres = vec![x[r.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = x.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut t = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            r.random_range(0..n)
        };
        centres.push(x[next].clone());
        for (dv, p) in dist.iter_mut().zip(x) {
            *dv = dv.min(sq_dist(p, &centres[centres.len() - 1]));
        }
    }
    let mut labels = vec![0usize; n];
    for it in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(x) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centres[a]).total_cmp(&sq_dist(p, &centres[b])))
                .unwrap();
            if best != *l {
                *l = best;
                changed = true;
            }
        }
        if !changed && it > 0 {
            break;
        }
        let mut sums = vec![DVector::zeros(d); k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(x) {
            sums[l] += p;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centres[j] = &sums[j] / counts[j] as f64;
            }
        }
    }
    labels
}

struct Component {
    weight: f64,
    mean: DVector<f64>,
    /// Lower Cholesky factor of the covariance.
    chol: DMatrix<f64>,
    log_det: f64,
}

fn m_step(x: &[DVector<f64>], resp: &[Vec<f64>], k: usize, d: usize, cov: Covariance) -> Option<Vec<Component>> {
    let n = x.len() as f64;
    let mut comps = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk < MIN_WEIGHT {
            return None;
        }
        let mut mean = DVector::zeros(d);
        for (r, p) in resp.iter().zip(x) {
            mean += p * r[j];
        }
        mean /= nk;
        let mut s = DMatrix::zeros(d, d);
        for (r, p) in resp.iter().zip(x) {
            let diff = p - &mean;
            match cov {
                Covariance::Full => s += &diff * diff.transpose() * r[j],
                Covariance::Diagonal => {
                    for t in 0..d {
                        s[(t, t)] += r[j] * diff[t] * diff[t];
                    }
                }
            }
        }
        s /= nk;
        for t in 0..d {
            s[(t, t)] += REG_COVAR;
        }
        let chol = s.cholesky()?.l();
        let log_det = 2.0 * (0..d).map(|t| chol[(t, t)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        comps.push(Component {
            weight: nk / n,
            mean,
            chol,
            log_det,
        });
    }
    Some(comps)
}

/// Responsibilities of every component for every row.
fn e_step(x: &[DVector<f64>], comps: &[Component], d: usize) -> Vec<Vec<f64>> {
    let log_norm = d as f64 * (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .map(|p| {
            let logs: Vec<f64> = comps
                .iter()
                .map(|c| {
                    let diff = p - &c.mean;
                    let sol = c.chol.solve_lower_triangular(&diff).unwrap_or(diff);
                    c.weight.ln() - 0.5 * (log_norm + c.log_det + sol.norm_squared())
                })
                .collect();
            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
            logs.iter().map(|l| (l - m).exp() / s).collect()
        })
        .collect()
}

fn em(x: &[DVector<f64>], init: &[usize], k: usize, d: usize, cov: Covariance) -> Option<Vec<usize>> {
    let mut resp: Vec<Vec<f64>> = init
        .iter()
        .map(|&l| (0..k).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..EM_ITERATIONS {
        let comps = m_step(x, &resp, k, d, cov)?;
        resp = e_step(x, &comps, d);
        if resp.iter().flatten().any(|v| !v.is_finite()) {
            return None;
        }
    }
    Some(
        resp.iter()
            .map(|r| (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_all_zero() {
        let codes = Tensor::new(vec![12, 1], (0..12).map(|i| i as f64).collect());
        assert_eq!(gmm_cluster(&codes, 1, 0).unwrap(), vec![0; 12]);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let codes = Tensor::new(vec![15, 1], (0..15).map(|i| i as f64).collect());
        assert!(matches!(gmm_cluster(&codes, 2, 0), Err(Error::Metric(_))));
    }

    #[test]
    fn identical_rows_fall_back_or_error_cleanly() {
        // One cluster is a single repeated point; the covariance floor keeps it fit.
        let mut data = vec![0.0; 40];
        data.extend((0..40).map(|i| 10.0 + (i % 7) as f64 * 0.1));
        let codes = Tensor::new(vec![40, 2], data);
        let l = gmm_cluster(&codes, 2, 0).unwrap();
        assert!(l[..20].iter().all(|&v| v == l[0]));
        assert!(l[20..].iter().all(|&v| v != l[0]));
    }
}
