//! Contrastive pairs in data space and latent space.
//!
//! For a batch `x` every step draws:
//! - a content positive `x_pos_c`: `x` under a random transformation,
//! - a content negative `x_neg_c`: `x` re-ordered by a derangement,
//! - two transformation positives `decode(c(k), z(k))`, `k = 1, 2`, where
//!   `c(k)` are content codes of the batch in two random orders and the
//!   `z(k)` are drawn from the prior.

mod transform;

pub use transform::{apply_transform, rotate_images, Resample, TransformKind, TransformSpec};

use rand::seq::SliceRandom;

use crate::datasets::ImageBatch;
use crate::error::{ensure, Error, Result};
use crate::model::{decode, encode, LatentCode, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

const TAG_TRANSFORM: u64 = 1;
const TAG_NEGATIVE: u64 = 2;
const TAG_PERM1: u64 = 3;
const TAG_PERM2: u64 = 4;
const TAG_Z1: u64 = 5;
const TAG_Z2: u64 = 6;

/// A uniformly random permutation of `0..n` with no fixed point.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        n >= 2,
        Error::config(format!("negatives need a batch of at least 2, got {n}"))
    );
    let mut rng = rng::rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Re-order the batch by a seeded derangement. Returns the negatives and the
/// permutation, so that negative row `i` is input row `perm[i]`.
pub fn permute_negatives(batch: &ImageBatch, seed: u64) -> Result<(ImageBatch, Vec<usize>)> {
    let perm = derangement(batch.len(), seed)?;
    Ok((gather_batch(batch, &perm), perm))
}

fn gather_batch(batch: &ImageBatch, perm: &[usize]) -> ImageBatch {
    ImageBatch {
        images: batch.images.gather_rows(perm),
        indices: perm.iter().map(|&p| batch.indices[p]).collect(),
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng::rng(seed));
    p
}

fn prior_draw(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
    Tensor::new(vec![rows, dim], rng::normal_vec(&mut rng::rng(seed), rows * dim))
}

/// Every random choice of one step's pairing, fixed by one seed. Draws do
/// not depend on which loss terms are active.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDraws {
    pub x_pos_c: ImageBatch,
    /// `[param, aux]` of the transformation applied to each row.
    pub transform_params: Vec<[f64; 2]>,
    pub negative_perm: Vec<usize>,
    /// Orders of the content codes fed to the two transformation positives.
    pub content_perms: [Vec<usize>; 2],
    /// Prior draws `z(1), z(2)`, `[B × d_z]`.
    pub z_draws: [Tensor<f64>; 2],
}

impl PairDraws {
    pub fn draw(batch: &ImageBatch, spec: &TransformSpec, d_z: usize, seed: u64) -> Result<Self> {
        let n = batch.len();
        let (x_pos_c, transform_params) = apply_transform(batch, spec, rng::derive(seed, TAG_TRANSFORM, 0))?;
        let negative_perm = derangement(n, rng::derive(seed, TAG_NEGATIVE, 0))?;
        Ok(PairDraws {
            x_pos_c,
            transform_params,
            negative_perm,
            content_perms: [
                permutation(n, rng::derive(seed, TAG_PERM1, 0)),
                permutation(n, rng::derive(seed, TAG_PERM2, 0)),
            ],
            z_draws: [
                prior_draw(n, d_z, rng::derive(seed, TAG_Z1, 0)),
                prior_draw(n, d_z, rng::derive(seed, TAG_Z2, 0)),
            ],
        })
    }

    /// The same draws with the two transformation positives exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        out.content_perms.swap(0, 1);
        out.z_draws.swap(0, 1);
        out
    }
}

/// One step's pairs, materialised in data space.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub x: ImageBatch,
    pub x_pos_c: ImageBatch,
    pub x_neg_c: ImageBatch,
    pub negative_perm: Vec<usize>,
    /// Transformation parameter per row (degrees for rotations).
    pub angles: Vec<f64>,
    pub content_perms: [Vec<usize>; 2],
    pub z_draws: [Tensor<f32>; 2],
    /// `decode(c(k), z(k))` with `c(k)` the posterior content means.
    pub x_pos_z: [Tensor<f32>; 2],
}

/// Build every pair of one step with the current model.
pub fn make_contrastive_batch(
    params: &ModelParams<f32>,
    batch: &ImageBatch,
    spec: &TransformSpec,
    seed: u64,
) -> Result<ContrastiveBatch> {
    let draws = PairDraws::draw(batch, spec, params.arch.d_z, seed)?;
    let (c, _) = encode(params, &batch.images)?;
    let z_draws = [draws.z_draws[0].cast::<f32>(), draws.z_draws[1].cast::<f32>()];
    let mut x_pos_z = Vec::with_capacity(2);
    for k in 0..2 {
        let ck = LatentCode::content(c.mean.gather_rows(&draws.content_perms[k]));
        let zk = LatentCode::transformation(z_draws[k].clone());
        x_pos_z.push(decode(params, &ck, &zk)?);
    }
    let [a, b]: [Tensor<f32>; 2] = x_pos_z.try_into().expect("two positives");
    Ok(ContrastiveBatch {
        x: batch.clone(),
        x_neg_c: gather_batch(batch, &draws.negative_perm),
        x_pos_c: draws.x_pos_c,
        negative_perm: draws.negative_perm,
        angles: draws.transform_params.iter().map(|p| p[0]).collect(),
        content_perms: draws.content_perms,
        z_draws,
        x_pos_z: [a, b],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize) -> ImageBatch {
        ImageBatch {
            images: Tensor::new(vec![n, 2, 2, 1], (0..n * 4).map(|i| (i % 9) as f32 / 8.0).collect()),
            indices: (100..100 + n).collect(),
        }
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        for seed in 0..50 {
            let p = derangement(7, seed).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..7).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &v)| i != v));
        }
    }

    #[test]
    fn two_rows_swap() {
        let (neg, perm) = permute_negatives(&batch(2), 3).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(neg.indices, vec![101, 100]);
    }

    #[test]
    fn single_row_is_rejected() {
        assert!(matches!(permute_negatives(&batch(1), 0), Err(Error::Config(_))));
    }

    #[test]
    fn negatives_track_source_rows() {
        let b = batch(6);
        let (neg, perm) = permute_negatives(&b, 9).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(neg.images.row(i), b.images.row(p));
            assert_eq!(neg.indices[i], b.indices[p]);
        }
    }

    #[test]
    fn draws_are_a_function_of_the_seed() {
        let b = batch(5);
        let spec = TransformSpec::default();
        let a = PairDraws::draw(&b, &spec, 3, 42).unwrap();
        assert_eq!(a, PairDraws::draw(&b, &spec, 3, 42).unwrap());
        assert_ne!(a, PairDraws::draw(&b, &spec, 3, 43).unwrap());
        assert_eq!(a.z_draws[0].shape, vec![5, 3]);
        assert_eq!(a.swapped().swapped(), a);
    }
}
