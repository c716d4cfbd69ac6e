//! Labelled image sets, their on-disk formats and deterministic batching.

mod container;
mod idx;
mod shapes;

pub use container::{read_dcset, write_dcset, DCSET_MAGIC};
pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use shapes::{gen_shapes, ShapeGenConfig, MAX_SHAPE_CLASSES};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Discretised ground truth for the transformation factors of each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformLabels {
    /// `[N × F]`, row-major.
    pub values: Vec<u32>,
    /// Number of bins of each factor axis.
    pub bins: Vec<usize>,
    pub names: Vec<String>,
}

impl TransformLabels {
    pub fn factors(&self) -> usize {
        self.bins.len()
    }

    pub fn column(&self, f: usize) -> Vec<u32> {
        let nf = self.factors();
        self.values.iter().skip(f).step_by(nf).copied().collect()
    }
}

/// Images in `[0, 1]` with content labels and optional transformation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    /// `[N × H × W × C]`
    pub images: Tensor<f32>,
    pub content_labels: Vec<u32>,
    pub num_classes: usize,
    pub transform_labels: Option<TransformLabels>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape[3]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.images.shape.len() == 4,
            Error::shape(format!("images must be [N,H,W,C], got {:?}", self.images.shape))
        );
        let n = self.len();
        ensure!(
            self.content_labels.len() == n,
            Error::Consistency(format!("{} content labels for {n} images", self.content_labels.len()))
        );
        ensure!(
            self.images.data.iter().all(|v| (0.0..=1.0).contains(v)),
            Error::Consistency("intensities outside [0, 1]".into())
        );
        ensure!(
            self.content_labels.iter().all(|&l| (l as usize) < self.num_classes),
            Error::Consistency(format!("content label outside 0..{}", self.num_classes))
        );
        if let Some(t) = &self.transform_labels {
            let f = t.factors();
            ensure!(
                t.values.len() == n * f && t.names.len() == f,
                Error::Consistency(format!("transform labels do not cover {n} samples x {f} factors"))
            );
            for (i, &v) in t.values.iter().enumerate() {
                ensure!(
                    (v as usize) < t.bins[i % f],
                    Error::Consistency(format!("transform label {v} outside bins of factor {}", i % f))
                );
            }
        }
        Ok(())
    }

    /// Rows `idx` as a new set.
    pub fn subset(&self, idx: &[usize]) -> LabeledImageSet {
        let transform_labels = self.transform_labels.as_ref().map(|t| {
            let f = t.factors();
            TransformLabels {
                values: idx.iter().flat_map(|&i| t.values[i * f..(i + 1) * f].iter().copied()).collect(),
                bins: t.bins.clone(),
                names: t.names.clone(),
            }
        });
        LabeledImageSet {
            name: self.name.clone(),
            images: self.images.gather_rows(idx),
            content_labels: idx.iter().map(|&i| self.content_labels[i]).collect(),
            num_classes: self.num_classes,
            transform_labels,
        }
    }

    /// The first `n` rows (all rows when `n` exceeds the set).
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// A batch of images with the dataset rows they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub indices: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Row groups of one epoch. A trailing group smaller than 2 is never
/// emitted; any other remainder shorter than `batch_size` is dropped too.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    ensure!(
        batch_size >= 2,
        Error::config(format!("batch size must be at least 2, got {batch_size}"))
    );
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::rng(seed));
    }
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Deterministic batches over one epoch of `set`.
pub fn batches(
    set: &LabeledImageSet,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = ImageBatch> + '_> {
    let order = epoch_order(set.len(), batch_size, seed, shuffle)?;
    Ok(order.into_iter().map(move |indices| ImageBatch {
        images: set.images.gather_rows(&indices),
        indices,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledImageSet {
        LabeledImageSet {
            name: "toy".into(),
            images: Tensor::new(vec![n, 2, 2, 1], (0..n * 4).map(|i| (i % 5) as f32 / 4.0).collect()),
            content_labels: (0..n).map(|i| (i % 3) as u32).collect(),
            num_classes: 3,
            transform_labels: None,
        }
    }

    #[test]
    fn batch_counts_drop_the_tail() {
        let order = epoch_order(960, 100, 1, true).unwrap();
        assert_eq!(order.len(), 9);
        assert!(order.iter().all(|b| b.len() == 100));
        let mut seen: Vec<usize> = order.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 900);
    }

    #[test]
    fn unshuffled_order_is_identity() {
        let order = epoch_order(10, 3, 5, false).unwrap();
        assert_eq!(order, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]);
    }

    #[test]
    fn shuffle_depends_only_on_seed() {
        let a = epoch_order(50, 10, 3, true).unwrap();
        assert_eq!(a, epoch_order(50, 10, 3, true).unwrap());
        assert_ne!(a, epoch_order(50, 10, 4, true).unwrap());
    }

    #[test]
    fn tiny_batches_are_rejected() {
        assert!(matches!(epoch_order(10, 1, 0, true), Err(Error::Config(_))));
        let set = toy(4);
        assert!(batches(&set, 0, 0, false).is_err());
    }

    #[test]
    fn batches_carry_matching_rows() {
        let set = toy(7);
        let all: Vec<ImageBatch> = batches(&set, 2, 9, true).unwrap().collect();
        assert_eq!(all.len(), 3);
        for b in &all {
            for (r, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.images.row(r), set.images.row(i));
            }
        }
    }

    #[test]
    fn validate_catches_bad_labels_and_ranges() {
        let mut set = toy(4);
        set.validate().unwrap();
        set.content_labels[0] = 3;
        assert!(set.validate().is_err());
        let mut set = toy(4);
        set.images.data[0] = 1.5;
        assert!(set.validate().is_err());
        let mut set = toy(4);
        set.transform_labels = Some(TransformLabels {
            values: vec![0, 1, 2, 0],
            bins: vec![2],
            names: vec!["angle".into()],
        });
        assert!(set.validate().is_err());
    }

    #[test]
    fn subset_keeps_labels_aligned() {
        let mut set = toy(5);
        set.transform_labels = Some(TransformLabels {
            values: vec![0, 1, 1, 0, 0, 0, 1, 1, 0, 1],
            bins: vec![2, 2],
            names: vec!["a".into(), "b".into()],
        });
        let s = set.subset(&[4, 1]);
        assert_eq!(s.content_labels, vec![1, 1]);
        assert_eq!(s.transform_labels.unwrap().values, vec![0, 1, 1, 0]);
    }
}
