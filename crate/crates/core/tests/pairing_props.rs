//! Contrastive pair construction: data-space transforms, negatives and the
//! generated transformation positives.

use dualcontrast::datasets::{epoch_order, gen_shapes, ImageBatch, LabeledImageSet, ShapeGenConfig};
use dualcontrast::error::Error;
use dualcontrast::model::{init_params, sample_latent, ArchConfig, CodeKind, GaussianLatent};
use dualcontrast::pairing::*;
use dualcontrast::tensor::Tensor;
use proptest::prelude::*;

fn shapes() -> LabeledImageSet {
    gen_shapes(&ShapeGenConfig {
        n_per_cell: 4,
        ..Default::default()
    })
    .unwrap()
}

fn batch_of(set: &LabeledImageSet, idx: &[usize]) -> ImageBatch {
    ImageBatch {
        images: set.images.gather_rows(idx),
        indices: idx.to_vec(),
    }
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

proptest! {
    #[test]
    fn derangements_never_fix_a_point(n in 2usize..64, seed in any::<u64>()) {
        let p = derangement(n, seed).unwrap();
        let mut seen = vec![false; n];
        for (i, &v) in p.iter().enumerate() {
            prop_assert!(v != i);
            prop_assert!(!seen[v]);
            seen[v] = true;
        }
        prop_assert_eq!(p, derangement(n, seed).unwrap());
    }
}

#[test]
fn two_element_batches_can_only_swap() {
    for seed in 0..20 {
        assert_eq!(derangement(2, seed).unwrap(), vec![1, 0]);
    }
    assert!(matches!(derangement(1, 0), Err(Error::Config(_))));
}

#[test]
fn four_quarter_turns_restore_shapes_exactly() {
    let set = shapes();
    let x = set.images.gather_rows(&(0..50).collect::<Vec<_>>());
    let mut y = x.clone();
    for _ in 0..4 {
        y = rotate_images(&y, 90.0, Resample::Bilinear);
    }
    assert_eq!(y, x);
}

#[test]
fn inverse_rotation_of_grid_aligned_positives_recovers_the_input() {
    let set = shapes();
    let b = batch_of(&set, &(0..32).collect::<Vec<_>>());
    for deg in [90.0, 180.0, 270.0] {
        let draws = PairDraws::draw(&b, &TransformSpec::rotation(deg, deg), 2, 5).unwrap();
        assert!(draws.transform_params.iter().all(|p| p[0] == deg));
        let back = rotate_images(&draws.x_pos_c.images, -deg, Resample::Bilinear);
        assert_eq!(back, b.images, "{deg} degrees");
    }
}

#[test]
fn off_grid_rotation_round_trip_only_loses_interpolation_detail() {
    let set = shapes();
    let x = set.images.gather_rows(&(0..100).map(|i| i * 7 % set.len()).collect::<Vec<_>>());
    let there = rotate_images(&x, 37.0, Resample::Bilinear);
    let back = rotate_images(&there, -37.0, Resample::Bilinear);
    let mad = mean_abs_diff(&back, &x);
    assert!(mad < 0.03, "mean absolute deviation {mad}");
    // and the rotation did move pixels
    assert!(mean_abs_diff(&there, &x) > 0.03);
}

#[test]
fn prior_draws_have_unit_variance() {
    let b = ImageBatch {
        images: Tensor::zeros(vec![4, 2, 2, 1]),
        indices: (0..4).collect(),
    };
    let spec = TransformSpec::rotation(0.0, 0.0);
    let mut sum = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    let mut n = 0.0;
    for seed in 0..10_000u64 {
        let d = PairDraws::draw(&b, &spec, 2, seed).unwrap();
        for t in &d.z_draws {
            for r in 0..t.rows() {
                for (k, &v) in t.row(r).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
        }
        n += 8.0;
    }
    for k in 0..2 {
        let mean = sum[k] / n;
        let var = sq[k] / n - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "coordinate {k}: variance {var}");
    }
    let again = PairDraws::draw(&b, &spec, 2, 3).unwrap();
    assert_eq!(again, PairDraws::draw(&b, &spec, 2, 3).unwrap());
}

#[test]
fn reparameterised_samples_centre_on_the_mean() {
    let dist = GaussianLatent::new(Tensor::<f64>::zeros(vec![100_000, 3]), Tensor::zeros(vec![100_000, 3])).unwrap();
    let s = sample_latent(&dist, CodeKind::Content, 21);
    for k in 0..3 {
        let m: f64 = (0..s.values.rows()).map(|r| s.values.row(r)[k]).sum::<f64>() / 1e5;
        assert!(m.abs() < 0.02, "coordinate {k}: mean {m}");
    }
}

#[test]
fn negatives_rarely_share_content_over_an_epoch() {
    let set = gen_shapes(&ShapeGenConfig::default()).unwrap();
    let k = set.num_classes as f64;
    let mut differ = 0usize;
    let mut total = 0usize;
    for (i, idx) in epoch_order(set.len(), 100, 11, true).unwrap().iter().enumerate() {
        let b = batch_of(&set, idx);
        let (neg, _) = permute_negatives(&b, i as u64).unwrap();
        for (a, n) in b.indices.iter().zip(&neg.indices) {
            differ += (set.content_labels[*a] != set.content_labels[*n]) as usize;
            total += 1;
        }
    }
    let frac = differ as f64 / total as f64;
    assert!(frac >= 1.0 - 1.0 / k - 0.05, "only {frac} of negatives differ in content");
}

#[test]
fn identity_pairs_on_a_two_row_batch() {
    let set = shapes();
    let arch = ArchConfig::for_input(28, 28, 1, 3, 2).unwrap();
    let params = init_params::<f32>(&arch, 1).unwrap();
    let b = batch_of(&set, &[0, 40]);
    let cb = make_contrastive_batch(&params, &b, &TransformSpec::rotation(0.0, 0.0), 8).unwrap();
    assert_eq!(cb.x_pos_c.images, b.images);
    assert_eq!(cb.negative_perm, vec![1, 0]);
    assert_eq!(cb.x_neg_c.images.row(0), b.images.row(1));
    assert_eq!(cb.x_neg_c.images.row(1), b.images.row(0));
    let shape = vec![2, 28, 28, 1];
    for t in [&cb.x.images, &cb.x_pos_c.images, &cb.x_neg_c.images, &cb.x_pos_z[0], &cb.x_pos_z[1]] {
        assert_eq!(t.shape, shape);
    }
    for t in &cb.x_pos_z {
        assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(cb.z_draws[0].shape, vec![2, 2]);
    assert_eq!(cb, make_contrastive_batch(&params, &b, &TransformSpec::rotation(0.0, 0.0), 8).unwrap());
}

#[test]
fn content_positives_are_exact_rotations_of_the_input() {
    let set = shapes();
    let b = batch_of(&set, &(0..10).collect::<Vec<_>>());
    let d = PairDraws::draw(&b, &TransformSpec::default(), 2, 99).unwrap();
    for r in 0..b.len() {
        let single = b.images.gather_rows(&[r]);
        let want = rotate_images(&single, d.transform_params[r][0], Resample::Bilinear);
        assert_eq!(want.data, d.x_pos_c.images.row(r));
        assert!((0.0..360.0).contains(&d.transform_params[r][0]));
    }
}
