//! Analytic gradients of the full objective against central finite
//! differences on a tiny model, in double precision.

use dualcontrast::datasets::ImageBatch;
use dualcontrast::losses::{LossTerms, LossWeights};
use dualcontrast::model::{init_params, ArchConfig, ModelParams};
use dualcontrast::pairing::{PairDraws, TransformSpec};
use dualcontrast::rng;
use dualcontrast::tensor::Tensor;
use dualcontrast::trainer::{build_objective, Ablation, StepNoise};
use rand::Rng as _;

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        height: 8,
        width: 8,
        channels: 1,
        conv_channels: vec![2, 1],
        decoder_hidden: vec![3, 3, 3, 3],
        d_c: 2,
        d_z: 2,
    }
}

fn batch(n: usize, seed: u64) -> ImageBatch {
    let mut r = rng::rng(seed);
    ImageBatch {
        images: Tensor::new(vec![n, 8, 8, 1], (0..n * 64).map(|_| r.random::<f32>()).collect()),
        indices: (0..n).collect(),
    }
}

fn flat(p: &ModelParams<f64>) -> Vec<f64> {
    p.named().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

fn set_flat(p: &mut ModelParams<f64>, v: &[f64]) {
    let mut at = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.data.copy_from_slice(&v[at..at + n]);
        at += n;
    }
}

struct Check {
    passed: usize,
    total: usize,
    worst: f64,
}

fn check(terms: LossTerms, seed: u64) -> Check {
    let arch = tiny_arch();
    let params = init_params::<f32>(&arch, seed).unwrap().cast::<f64>();
    assert!(params.num_params() <= 500);
    let b = batch(4, seed + 100);
    let draws = PairDraws::draw(&b, &TransformSpec::default(), arch.d_z, seed + 200).unwrap();
    let noise = StepNoise::draw(4, arch.d_c, arch.d_z, seed + 300);
    let w = LossWeights::default();

    let obj = build_objective(&params, &b.images, &draws, &noise, w, terms).unwrap();
    let mut grads = obj.graph.backward(obj.total);
    let analytic: Vec<f64> = obj
        .bound
        .all
        .iter()
        .zip(params.named())
        .flat_map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let base = flat(&params);
    let mut probe = params.clone();
    let mut value = |v: &[f64]| {
        set_flat(&mut probe, v);
        let o = build_objective(&probe, &b.images, &draws, &noise, w, terms).unwrap();
        o.graph.scalar(o.total)
    };
    let eps = 1e-4;
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        let up = value(&v);
        v[i] = base[i] - eps;
        let down = value(&v);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel <= 1e-3 {
            passed += 1;
        } else {
            worst = worst.max(rel);
        }
    }
    Check {
        passed,
        total: base.len(),
        worst,
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    for seed in [1, 2] {
        let c = check(LossTerms::ALL, seed);
        let frac = c.passed as f64 / c.total as f64;
        assert!(
            frac >= 0.95,
            "seed {seed}: {}/{} coordinates within 1e-3 (worst outlier {:.3e})",
            c.passed,
            c.total,
            c.worst
        );
    }
}

#[test]
fn every_ablation_gradient_matches_finite_differences() {
    for a in Ablation::ALL {
        let c = check(a.terms(), 7);
        let frac = c.passed as f64 / c.total as f64;
        assert!(frac >= 0.95, "{a}: {}/{} coordinates", c.passed, c.total);
    }
}

#[test]
fn ablation_algebra_is_exact_on_a_batch() {
    let arch = tiny_arch();
    let params = init_params::<f32>(&arch, 3).unwrap();
    let b = batch(6, 3);
    let draws = PairDraws::draw(&b, &TransformSpec::default(), arch.d_z, 9).unwrap();
    let noise = StepNoise::draw(6, arch.d_c, arch.d_z, 9);
    let w = LossWeights::default();
    let full = build_objective(&params, &b.images, &draws, &noise, w, LossTerms::ALL).unwrap();
    let vae = build_objective(&params, &b.images, &draws, &noise, w, Ablation::VaeOnly.terms()).unwrap();
    let (f, v) = (full.breakdown, vae.breakdown);
    assert_eq!(f.total, v.total + f.l_con_c + f.l_con_z);
    assert_eq!((v.l_con_c, v.l_con_z), (0.0, 0.0));
    assert_eq!(f.l_rec, v.l_rec);
    // the graph's own scalar agrees with the audit
    assert!((full.graph.scalar(full.total) as f64 - f.total).abs() < 1e-5);
}

#[test]
fn swapping_the_transformation_positives_leaves_the_loss_unchanged() {
    let arch = tiny_arch();
    let params = init_params::<f32>(&arch, 4).unwrap().cast::<f64>();
    let b = batch(5, 4);
    let draws = PairDraws::draw(&b, &TransformSpec::default(), arch.d_z, 17).unwrap();
    let noise = StepNoise::draw(5, arch.d_c, arch.d_z, 17);
    let w = LossWeights::default();
    let a = build_objective(&params, &b.images, &draws, &noise, w, LossTerms::ALL).unwrap();
    let s = build_objective(&params, &b.images, &draws.swapped(), &noise, w, LossTerms::ALL).unwrap();
    assert_eq!(a.breakdown, s.breakdown);
}
