//! The differentiable training objective for one batch.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::losses::{LossBreakdown, LossTerms, LossWeights, RawTerms};
use crate::model::{decode_graph, encode_graph, Bound, ModelParams};
use crate::pairing::PairDraws;
use crate::rng;
use crate::tensor::{Real, Tensor};

const TAG_EPS: u64 = 16;

/// Reparameterisation noise for `(c, z)` of the input and the transformed view.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub eps: [Vec<f64>; 4],
}

impl StepNoise {
    pub fn draw(rows: usize, d_c: usize, d_z: usize, seed: u64) -> Self {
        let draw = |k: u64, d: usize| rng::normal_vec::<f64>(&mut rng::rng(rng::derive(seed, TAG_EPS, k)), rows * d);
        StepNoise {
            eps: [draw(0, d_c), draw(1, d_z), draw(2, d_c), draw(3, d_z)],
        }
    }
}

/// A built objective: the graph, bound parameters, the scalar loss and its audit.
pub struct Objective<T> {
    pub graph: Graph<T>,
    pub bound: Bound,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn cast_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Assemble the objective for the batch `x` under fixed draws. Contrastive
/// branches whose terms are all disabled are not built.
pub fn build_objective<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<f32>,
    draws: &PairDraws,
    noise: &StepNoise,
    weights: LossWeights,
    terms: LossTerms,
) -> Result<Objective<T>> {
    let arch = &params.arch;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.constant(x.cast::<T>());
    let xp = g.constant(draws.x_pos_c.images.cast::<T>());

    let e_x = encode_graph(&mut g, &bound, xv);
    let e_p = encode_graph(&mut g, &bound, xp);

    // VAE terms for both views, with reparameterised draws.
    let mut raw = RawTerms::default();
    let view = |g: &mut Graph<T>, e: &crate::model::EncodedVars, input: Var, ec: &[f64], ez: &[f64]| {
        let c = g.reparam(e.c_mean, e.c_log_var, cast_vec(ec));
        let z = g.reparam(e.z_mean, e.z_log_var, cast_vec(ez));
        let x_hat = decode_graph(g, &bound, arch, c, z);
        (g.mse(x_hat, input), g.kl(e.c_mean, e.c_log_var), g.kl(e.z_mean, e.z_log_var))
    };
    let (rec_x, klc_x, klz_x) = view(&mut g, &e_x, xv, &noise.eps[0], &noise.eps[1]);
    let (rec_p, klc_p, klz_p) = view(&mut g, &e_p, xp, &noise.eps[2], &noise.eps[3]);
    let rec = g.add(rec_x, rec_p);
    let kl_c = g.add(klc_x, klc_p);
    let kl_z = g.add(klz_x, klz_p);
    raw.rec = g.scalar(rec).to_f64();
    raw.kl_c = g.scalar(kl_c).to_f64();
    raw.kl_z = g.scalar(kl_z).to_f64();

    let wc = g.scale(kl_c, T::from_f64(weights.gamma_c));
    let wz = g.scale(kl_z, T::from_f64(weights.gamma_z));
    let vae = g.add(rec, wc);
    let vae = g.add(vae, wz);

    let mut con_c: Option<Var> = None;
    let mut con_z: Option<Var> = None;
    let push = |g: &mut Graph<T>, slot: &mut Option<Var>, v: Var| {
        *slot = Some(match *slot {
            Some(s) => g.add(s, v),
            None => v,
        });
    };

    if terms.dist_c {
        let v = g.cos_dist(e_x.c_mean, e_p.c_mean);
        raw.dist_c = g.scalar(v).to_f64();
        push(&mut g, &mut con_c, v);
    }
    if terms.sim_c {
        let c_neg = g.gather_rows(e_x.c_mean, &draws.negative_perm);
        let v = g.abs_cos_sim(e_x.c_mean, c_neg);
        raw.sim_c = g.scalar(v).to_f64();
        push(&mut g, &mut con_c, v);
    }
    if terms.dist_z {
        let mut z_pos = Vec::with_capacity(2);
        for k in 0..2 {
            let ck = g.gather_rows(e_x.c_mean, &draws.content_perms[k]);
            let zk = g.constant(draws.z_draws[k].cast::<T>());
            let xk = decode_graph(&mut g, &bound, arch, ck, zk);
            z_pos.push(encode_graph(&mut g, &bound, xk).z_mean);
        }
        let v = g.cos_dist(z_pos[0], z_pos[1]);
        raw.dist_z = g.scalar(v).to_f64();
        push(&mut g, &mut con_z, v);
    }
    if terms.sim_z {
        let v = g.abs_cos_sim(e_x.z_mean, e_p.z_mean);
        raw.sim_z = g.scalar(v).to_f64();
        push(&mut g, &mut con_z, v);
    }

    let breakdown = LossBreakdown::assemble(raw, weights, terms)?;
    let mut parts = [terms.vae.then_some(vae), con_c, con_z].into_iter().flatten();
    let first = parts.next().expect("assemble rejects an empty objective");
    let total = parts.fold(first, |acc, p| g.add(acc, p));
    Ok(Objective {
        graph: g,
        bound,
        total,
        breakdown,
    })
}
