//! Scalar objectives: reconstruction, Gaussian KL to a standard-normal prior,
//! the cosine-based contrastive terms and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::GaussianLatent;
use crate::tensor::{Real, Tensor};

/// Guard added to cosine denominators.
pub const COS_EPS: f64 = 1e-8;

/// Default weight of both KL terms.
pub const DEFAULT_GAMMA: f64 = 0.01;

/// Shared math for the value-level losses and the differentiable graph nodes.
/// All reductions accumulate in f64.
pub mod kernels {
    use super::COS_EPS;
    use crate::tensor::Real;

    pub fn mse<T: Real>(a: &[T], b: &[T]) -> f64 {
        if a.is_empty() {
            return 0.0;
        }
        let s: f64 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x.to_f64() - y.to_f64();
                d * d
            })
            .sum();
        s / a.len() as f64
    }

    pub fn kl<T: Real>(mean: &[T], log_var: &[T], rows: usize, dim: usize) -> f64 {
        if rows == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for r in 0..rows {
            let mut s = 0.0;
            for j in r * dim..(r + 1) * dim {
                let m = mean[j].to_f64();
                let l = log_var[j].to_f64();
                s += l.exp() + m * m - 1.0 - l;
            }
            total += 0.5 * s;
        }
        total / rows as f64
    }

    /// (dot, |a|, |b|) for one row pair.
    #[inline]
    pub fn cos_parts<T: Real>(a: &[T], b: &[T]) -> (f64, f64, f64) {
        let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x.to_f64(), y.to_f64());
            dot += x * y;
            aa += x * x;
            bb += y * y;
        }
        (dot, aa.sqrt(), bb.sqrt())
    }

    #[inline]
    pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
        let (dot, na, nb) = cos_parts(a, b);
        dot / (na * nb + COS_EPS)
    }

    pub fn mean_cos_dist<T: Real>(a: &[T], b: &[T], dim: usize) -> f64 {
        if dim == 0 || a.is_empty() {
            return 0.0;
        }
        let rows = a.len() / dim;
        let s: f64 = a
            .chunks_exact(dim)
            .zip(b.chunks_exact(dim))
            .map(|(x, y)| 1.0 - cosine(x, y))
            .sum();
        s / rows as f64
    }

    pub fn mean_abs_cos_sim<T: Real>(a: &[T], b: &[T], dim: usize) -> f64 {
        if dim == 0 || a.is_empty() {
            return 0.0;
        }
        let rows = a.len() / dim;
        let s: f64 = a
            .chunks_exact(dim)
            .zip(b.chunks_exact(dim))
            .map(|(x, y)| cosine(x, y).abs())
            .sum();
        s / rows as f64
    }

    /// Gradients of `mean_cos_dist` (`abs = false`) or `mean_abs_cos_sim`
    /// (`abs = true`) with respect to both operands.
    pub fn cos_loss_grad<T: Real>(a: &[T], b: &[T], dim: usize, abs: bool) -> (Vec<f64>, Vec<f64>) {
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        if dim == 0 || a.is_empty() {
            return (ga, gb);
        }
        let rows = (a.len() / dim) as f64;
        for (r, (x, y)) in a.chunks_exact(dim).zip(b.chunks_exact(dim)).enumerate() {
            let (dot, na, nb) = cos_parts(x, y);
            let den = na * nb + COS_EPS;
            let cos = dot / den;
            // d(loss_row)/d(cos)
            let outer = if abs {
                if cos > 0.0 {
                    1.0
                } else if cos < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            } else {
                -1.0
            } / rows;
            let ca = if na > 0.0 { dot * nb / (den * den * na) } else { 0.0 };
            let cb = if nb > 0.0 { dot * na / (den * den * nb) } else { 0.0 };
            for j in 0..dim {
                let (xj, yj) = (x[j].to_f64(), y[j].to_f64());
                ga[r * dim + j] = outer * (yj / den - ca * xj);
                gb[r * dim + j] = outer * (xj / den - cb * yj);
            }
        }
        (ga, gb)
    }
}

/// Which loss terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub vae: bool,
    pub dist_c: bool,
    pub sim_c: bool,
    pub dist_z: bool,
    pub sim_z: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        vae: true,
        dist_c: true,
        sim_c: true,
        dist_z: true,
        sim_z: true,
    };

    pub fn any(&self) -> bool {
        self.vae || self.dist_c || self.sim_c || self.dist_z || self.sim_z
    }

    pub fn any_contrastive(&self) -> bool {
        self.dist_c || self.sim_c || self.dist_z || self.sim_z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_c: f64,
    pub gamma_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_c: DEFAULT_GAMMA,
            gamma_z: DEFAULT_GAMMA,
        }
    }
}

/// Per-step audit of the objective. Inactive terms are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl_c: f64,
    pub l_kl_z: f64,
    pub l_con_c: f64,
    pub l_con_z: f64,
    pub total: f64,
    pub gamma_c: f64,
    pub gamma_z: f64,
}

/// Raw term values before masking and weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawTerms {
    pub rec: f64,
    pub kl_c: f64,
    pub kl_z: f64,
    pub dist_c: f64,
    pub sim_c: f64,
    pub dist_z: f64,
    pub sim_z: f64,
}

impl LossBreakdown {
    /// Masks inactive terms and forms the weighted total. The contrastive
    /// terms are added last and in a fixed order so that the full objective
    /// equals the VAE-only objective plus `l_con_c + l_con_z` exactly.
    pub fn assemble(raw: RawTerms, weights: LossWeights, terms: LossTerms) -> Result<Self> {
        ensure!(terms.any(), Error::config("every loss term is disabled"));
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        let l_rec = on(terms.vae, raw.rec);
        let l_kl_c = on(terms.vae, raw.kl_c);
        let l_kl_z = on(terms.vae, raw.kl_z);
        let l_con_c = on(terms.dist_c, raw.dist_c) + on(terms.sim_c, raw.sim_c);
        let l_con_z = on(terms.dist_z, raw.dist_z) + on(terms.sim_z, raw.sim_z);
        let vae = l_rec + weights.gamma_c * l_kl_c + weights.gamma_z * l_kl_z;
        Ok(LossBreakdown {
            l_rec,
            l_kl_c,
            l_kl_z,
            l_con_c,
            l_con_z,
            total: vae + l_con_c + l_con_z,
            gamma_c: weights.gamma_c,
            gamma_z: weights.gamma_z,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_kl_c, self.l_kl_z, self.l_con_c, self.l_con_z, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.shape == b.shape,
        Error::shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape))
    );
    Ok(())
}

/// Mean squared error over every element.
pub fn recon_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    check_same(x, x_hat, "reconstruction")?;
    Ok(kernels::mse(&x.data, &x_hat.data))
}

/// Batch mean of `KL(N(mean, exp(log_var)) ‖ N(0, I))`.
pub fn kl_gaussian<T: Real>(dist: &GaussianLatent<T>) -> f64 {
    kernels::kl(&dist.mean.data, &dist.log_var.data, dist.rows(), dist.dim())
}

/// `(1/B) Σ_i |cos(a_i, b_i)|`.
pub fn mean_abs_cos_sim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b, "cosine similarity")?;
    Ok(kernels::mean_abs_cos_sim(&a.data, &b.data, a.row_len()))
}

/// `(1/B) Σ_i (1 − cos(a_i, b_i))`.
pub fn mean_cos_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b, "cosine distance")?;
    Ok(kernels::mean_cos_dist(&a.data, &b.data, a.row_len()))
}

/// Pull content codes of positives together, push negatives apart.
pub fn loss_con_c<T: Real>(c: &Tensor<T>, c_pos: &Tensor<T>, c_neg: &Tensor<T>) -> Result<f64> {
    Ok(mean_cos_dist(c, c_pos)? + mean_abs_cos_sim(c, c_neg)?)
}

/// Pull the two decoder-generated transformation positives together and push
/// the codes of an image and its transformed copy apart.
pub fn loss_con_z<T: Real>(
    z: &Tensor<T>,
    z_neg: &Tensor<T>,
    z_pos1: &Tensor<T>,
    z_pos2: &Tensor<T>,
) -> Result<f64> {
    Ok(mean_cos_dist(z_pos1, z_pos2)? + mean_abs_cos_sim(z, z_neg)?)
}

/// Reconstruction and posteriors of one view (the input or its transformed copy).
pub struct VaeView<'a, T> {
    pub x: &'a Tensor<T>,
    pub x_hat: &'a Tensor<T>,
    pub dist_c: &'a GaussianLatent<T>,
    pub dist_z: &'a GaussianLatent<T>,
}

/// Codes entering the two contrastive losses.
pub struct ContrastiveCodes<'a, T> {
    pub c: &'a Tensor<T>,
    pub c_pos: &'a Tensor<T>,
    pub c_neg: &'a Tensor<T>,
    pub z: &'a Tensor<T>,
    pub z_neg: &'a Tensor<T>,
    pub z_pos1: &'a Tensor<T>,
    pub z_pos2: &'a Tensor<T>,
}

/// Value-level objective: the VAE loss summed over the input and transformed
/// views plus the enabled contrastive terms.
pub fn total_loss<T: Real>(
    views: [VaeView<'_, T>; 2],
    codes: &ContrastiveCodes<'_, T>,
    weights: LossWeights,
    terms: LossTerms,
) -> Result<LossBreakdown> {
    let mut raw = RawTerms::default();
    for v in &views {
        raw.rec += recon_loss(v.x, v.x_hat)?;
        raw.kl_c += kl_gaussian(v.dist_c);
        raw.kl_z += kl_gaussian(v.dist_z);
    }
    raw.dist_c = mean_cos_dist(codes.c, codes.c_pos)?;
    raw.sim_c = mean_abs_cos_sim(codes.c, codes.c_neg)?;
    raw.dist_z = mean_cos_dist(codes.z_pos1, codes.z_pos2)?;
    raw.sim_z = mean_abs_cos_sim(codes.z, codes.z_neg)?;
    LossBreakdown::assemble(raw, weights, terms)
}
