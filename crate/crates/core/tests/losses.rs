//! Loss values against independent naive-loop and Monte-Carlo oracles.

use dualcontrast::losses::*;
use dualcontrast::model::GaussianLatent;
use dualcontrast::rng;
use dualcontrast::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn random_rows(r: &mut rng::Rng, rows: usize, dim: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| r.random_range(-2.0..2.0)).collect())
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-8)
}

fn naive_dist(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let rows = a.rows();
    let mut s = 0.0;
    for i in 0..rows {
        s += 1.0 - naive_cos(a.row(i), b.row(i));
    }
    s / rows as f64
}

fn naive_sim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let rows = a.rows();
    let mut s = 0.0;
    for i in 0..rows {
        s += naive_cos(a.row(i), b.row(i)).abs();
    }
    s / rows as f64
}

#[test]
fn content_contrastive_loss_matches_naive_loops() {
    let mut r = rng::rng(11);
    for _ in 0..20 {
        let c = random_rows(&mut r, 16, 10);
        let cp = random_rows(&mut r, 16, 10);
        let cn = random_rows(&mut r, 16, 10);
        let want = naive_dist(&c, &cp) + naive_sim(&c, &cn);
        assert!((loss_con_c(&c, &cp, &cn).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn transformation_contrastive_loss_matches_naive_loops() {
    let mut r = rng::rng(12);
    for _ in 0..20 {
        let z = random_rows(&mut r, 16, 4);
        let zn = random_rows(&mut r, 16, 4);
        let p1 = random_rows(&mut r, 16, 4);
        let p2 = random_rows(&mut r, 16, 4);
        let want = naive_dist(&p1, &p2) + naive_sim(&z, &zn);
        assert!((loss_con_z(&z, &zn, &p1, &p2).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn reconstruction_matches_per_pixel_sum() {
    let mut r = rng::rng(13);
    let shape = vec![3, 5, 4, 2];
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..n).map(|_| r.random::<f64>()).collect());
    let y = Tensor::new(shape, (0..n).map(|_| r.random::<f64>()).collect());
    let mut s = 0.0;
    for b in 0..3 {
        for h in 0..5 {
            for w in 0..4 {
                for c in 0..2 {
                    let i = ((b * 5 + h) * 4 + w) * 2 + c;
                    s += (x.data[i] - y.data[i]).powi(2);
                }
            }
        }
    }
    assert!((recon_loss(&x, &y).unwrap() - s / (3.0 * 5.0 * 4.0 * 2.0)).abs() < 1e-6);
}

/// KL(q‖p) = E_q[log q(x) − log p(x)] estimated from draws of q.
fn monte_carlo_kl(mean: &[f64], log_var: &[f64], draws: usize, seed: u64) -> f64 {
    let mut r = rng::rng(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let mut s = 0.0;
        for (&m, &lv) in mean.iter().zip(log_var) {
            let e: f64 = StandardNormal.sample(&mut r);
            let sd = (0.5 * lv).exp();
            let x = m + sd * e;
            let log_q = -0.5 * e * e - sd.ln();
            let log_p = -0.5 * x * x;
            s += log_q - log_p;
        }
        total += s;
    }
    total / draws as f64
}

#[test]
fn analytic_kl_agrees_with_monte_carlo() {
    let cases: [(&[f64], &[f64]); 3] = [
        (&[1.0, -0.5, 0.3], &[0.2, -0.7, 0.5]),
        (&[2.0], &[-1.0]),
        (&[0.0, 0.8], &[1.0, 0.0]),
    ];
    for (i, (m, lv)) in cases.iter().enumerate() {
        let dist = GaussianLatent::new(
            Tensor::new(vec![1, m.len()], m.to_vec()),
            Tensor::new(vec![1, lv.len()], lv.to_vec()),
        )
        .unwrap();
        let exact = kl_gaussian(&dist);
        let mc = monte_carlo_kl(m, lv, 1_000_000, i as u64);
        assert!((mc - exact).abs() <= 0.01 * exact, "case {i}: analytic {exact}, monte carlo {mc}");
    }
}

#[test]
fn vae_only_total_has_zero_contrastive_fields() {
    let x = Tensor::new(vec![2, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let x_hat = x.map(|v| v + 0.1);
    let dist = GaussianLatent::new(Tensor::new(vec![2, 1], vec![0.5, -0.5]), Tensor::new(vec![2, 1], vec![0.0; 2])).unwrap();
    let codes = Tensor::new(vec![2, 1], vec![1.0, 2.0]);
    let views = || VaeView {
        x: &x,
        x_hat: &x_hat,
        dist_c: &dist,
        dist_z: &dist,
    };
    let cc = ContrastiveCodes {
        c: &codes,
        c_pos: &codes,
        c_neg: &codes,
        z: &codes,
        z_neg: &codes,
        z_pos1: &codes,
        z_pos2: &codes,
    };
    let terms = LossTerms {
        dist_c: false,
        sim_c: false,
        dist_z: false,
        sim_z: false,
        ..LossTerms::ALL
    };
    let w = LossWeights::default();
    let b = total_loss([views(), views()], &cc, w, terms).unwrap();
    assert_eq!((b.l_con_c, b.l_con_z), (0.0, 0.0));
    let want = b.l_rec + w.gamma_c * b.l_kl_c + w.gamma_z * b.l_kl_z;
    assert!((b.total - want).abs() < 1e-15);
    assert!((b.l_rec - 0.02).abs() < 1e-12);
    assert!((b.l_kl_c - 0.25).abs() < 1e-12);
}

#[test]
fn perfect_model_has_zero_total() {
    let x = Tensor::new(vec![2, 1, 1, 1], vec![0.2, 0.9]);
    let prior = GaussianLatent::new(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2, 2])).unwrap();
    let c = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let perp = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
    let view = || VaeView {
        x: &x,
        x_hat: &x,
        dist_c: &prior,
        dist_z: &prior,
    };
    let codes = ContrastiveCodes {
        c: &c,
        c_pos: &c,
        c_neg: &perp,
        z: &c,
        z_neg: &perp,
        z_pos1: &c,
        z_pos2: &c,
    };
    let b = total_loss([view(), view()], &codes, LossWeights::default(), LossTerms::ALL).unwrap();
    assert!(b.total.abs() < 1e-7);
}

proptest! {
    #[test]
    fn contrastive_terms_stay_in_bounds(
        a in proptest::collection::vec(-100.0f64..100.0, 12),
        b in proptest::collection::vec(-100.0f64..100.0, 12),
    ) {
        let a = Tensor::new(vec![3, 4], a);
        let b = Tensor::new(vec![3, 4], b);
        let d = mean_cos_dist(&a, &b).unwrap();
        let s = mean_abs_cos_sim(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn row_rescaling_leaves_cosines_unchanged(
        a in proptest::collection::vec(0.1f64..3.0, 8),
        b in proptest::collection::vec(-3.0f64..-0.1, 8),
        scales in proptest::collection::vec(1e-3f64..1e3, 2),
    ) {
        let a = Tensor::new(vec![2, 4], a);
        let b = Tensor::new(vec![2, 4], b);
        let mut scaled = a.clone();
        for (r, k) in scales.iter().enumerate() {
            for v in &mut scaled.data[r * 4..(r + 1) * 4] {
                *v *= k;
            }
        }
        prop_assert!((mean_cos_dist(&a, &b).unwrap() - mean_cos_dist(&scaled, &b).unwrap()).abs() <= 1e-6);
        prop_assert!((mean_abs_cos_sim(&a, &b).unwrap() - mean_abs_cos_sim(&scaled, &b).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn full_objective_is_vae_plus_contrastive(
        raw in proptest::collection::vec(0.0f64..2.0, 7),
        gc in 0.0f64..1.0,
        gz in 0.0f64..1.0,
    ) {
        let r = RawTerms { rec: raw[0], kl_c: raw[1], kl_z: raw[2], dist_c: raw[3], sim_c: raw[4], dist_z: raw[5], sim_z: raw[6] };
        let w = LossWeights { gamma_c: gc, gamma_z: gz };
        let full = LossBreakdown::assemble(r, w, LossTerms::ALL).unwrap();
        let vae = LossBreakdown::assemble(r, w, LossTerms { dist_c: false, sim_c: false, dist_z: false, sim_z: false, ..LossTerms::ALL }).unwrap();
        prop_assert_eq!(full.total, vae.total + full.l_con_c + full.l_con_z);
    }
}
