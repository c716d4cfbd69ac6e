//! Optimisation loop: seeded batching, one Adam update per batch against the
//! full objective, step-decayed learning rate, checkpoints and resume.
//!
//! Every random draw of a step is keyed by `(seed, global step)` and every
//! epoch order by `(seed, epoch)`, so a resumed run replays exactly what an
//! uninterrupted run would have done. All arithmetic is single-threaded.

mod objective;
mod run_dir;

pub use objective::{build_objective, Objective, StepNoise};
pub use run_dir::{RunDir, CONFIG_FILE, LOCK_FILE, MODEL_FILE, STEP_LOG_FILE};

use std::io::{BufRead, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint};
use crate::datasets::{epoch_order, ImageBatch, LabeledImageSet};
use crate::error::{ensure, Error, Result};
use crate::losses::{LossBreakdown, LossTerms, LossWeights, DEFAULT_GAMMA};
use crate::model::{init_params, ArchConfig, ModelParams};
use crate::pairing::{PairDraws, TransformSpec};
use crate::rng::{self, stream};

/// Which parts of the objective are optimised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    VaeOnly,
    NoConC,
    NoConZ,
    PosOnly,
    NegOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::VaeOnly,
        Ablation::NoConC,
        Ablation::NoConZ,
        Ablation::PosOnly,
        Ablation::NegOnly,
    ];

    pub fn terms(self) -> LossTerms {
        let t = |dist_c, sim_c, dist_z, sim_z| LossTerms {
            vae: true,
            dist_c,
            sim_c,
            dist_z,
            sim_z,
        };
        match self {
            Ablation::Full => t(true, true, true, true),
            Ablation::VaeOnly => t(false, false, false, false),
            Ablation::NoConC => t(false, false, true, true),
            Ablation::NoConZ => t(true, true, false, false),
            Ablation::PosOnly => t(true, false, true, false),
            Ablation::NegOnly => t(false, true, false, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::VaeOnly => "vae_only",
            Ablation::NoConC => "no_con_c",
            Ablation::NoConZ => "no_con_z",
            Ablation::PosOnly => "pos_only",
            Ablation::NegOnly => "neg_only",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub gamma_c: f64,
    pub gamma_z: f64,
    pub d_c: usize,
    pub d_z: usize,
    /// Hidden widths of the decoder (four hidden layers give five layers).
    pub decoder_hidden: Vec<usize>,
    pub transform: TransformSpec,
    pub ablation: Ablation,
    pub seed: u64,
    /// Save `ckpt_{epoch}.bin` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 100,
            base_lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 50,
            gamma_c: DEFAULT_GAMMA,
            gamma_z: DEFAULT_GAMMA,
            d_c: 10,
            d_z: 10,
            decoder_hidden: vec![512; 4],
            transform: TransformSpec::default(),
            ablation: Ablation::Full,
            seed: 0,
            checkpoint_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Error::config("epochs must be at least 1"));
        ensure!(
            self.batch_size >= 2,
            Error::config(format!("batch_size must be at least 2, got {}", self.batch_size))
        );
        ensure!(
            self.base_lr > 0.0 && self.base_lr.is_finite(),
            Error::config("base_lr must be positive")
        );
        ensure!(
            self.lr_decay > 0.0 && self.lr_decay_every >= 1,
            Error::config("lr decay factor must be positive and its period at least 1")
        );
        ensure!(
            self.gamma_c >= 0.0 && self.gamma_z >= 0.0,
            Error::config("KL weights must be non-negative")
        );
        ensure!(self.d_c >= 1 && self.d_z >= 1, Error::config("latent dims must be positive"));
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma_c: self.gamma_c,
            gamma_z: self.gamma_z,
        }
    }

    /// Model layout for images of the given size.
    pub fn arch_for(&self, height: usize, width: usize, channels: usize) -> Result<ArchConfig> {
        let mut arch = ArchConfig::for_input(height, width, channels, self.d_c, self.d_z)?;
        arch.decoder_hidden = self.decoder_hidden.clone();
        arch.validate()?;
        Ok(arch)
    }

    /// Two configs that may share one run: they differ at most in `epochs`
    /// and `checkpoint_every`, neither of which changes any step.
    fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            epochs: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_update(params: &mut ModelParams<f32>, state: &mut AdamState, grads: &[Vec<f32>], lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, m), v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .zip(grads)
    {
        for (((pi, mi), vi), &gi) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(g) {
            let gi = gi as f64;
            let mn = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * gi;
            let vn = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *pi = (*pi as f64 - update) as f32;
        }
    }
}

/// Seed of every random draw made in optimisation step `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    rng::derive(seed, stream::STEP, step)
}

/// Objective value, audit and gradients (in parameter order) for one batch.
pub fn loss_and_grads(
    params: &ModelParams<f32>,
    batch: &ImageBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
    let arch = &params.arch;
    let draws = PairDraws::draw(batch, &cfg.transform, arch.d_z, seed)?;
    let noise = StepNoise::draw(batch.len(), arch.d_c, arch.d_z, seed);
    let obj = build_objective(params, &batch.images, &draws, &noise, cfg.weights(), cfg.ablation.terms())?;
    let mut grads = obj.graph.backward(obj.total);
    let out = obj
        .bound
        .all
        .iter()
        .zip(params.named())
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((obj.breakdown, out))
}

/// One Adam step against the objective. A pure function of its inputs and
/// `seed`; aborts on a non-finite loss or gradient.
pub fn train_step(
    params: &mut ModelParams<f32>,
    state: &mut AdamState,
    batch: &ImageBatch,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
    step: u64,
) -> Result<LossBreakdown> {
    ensure!(
        batch.len() >= 2,
        Error::config(format!("a step needs at least 2 images, got {}", batch.len()))
    );
    let (loss, grads) = loss_and_grads(params, batch, cfg, seed)?;
    ensure!(
        loss.is_finite(),
        Error::NonFinite {
            step,
            detail: format!("loss terms {loss:?}"),
        }
    );
    if let Some((name, _)) = params
        .named()
        .iter()
        .zip(&grads)
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of {} with loss terms {loss:?}", name.0),
        });
    }
    adam_update(params, state, &grads, lr);
    Ok(loss)
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub l_rec: f64,
    pub l_kl_c: f64,
    pub l_kl_z: f64,
    pub l_con_c: f64,
    pub l_con_z: f64,
    pub total: f64,
    /// Wall-clock seconds; zero for epochs replayed from a log.
    pub seconds: f64,
}

impl EpochSummary {
    fn from_records(epoch: usize, recs: &[StepRecord], seconds: f64) -> Self {
        let n = recs.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| recs.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
        EpochSummary {
            epoch,
            lr: recs.first().map_or(0.0, |r| r.lr),
            steps: recs.len(),
            l_rec: mean(|l| l.l_rec),
            l_kl_c: mean(|l| l.l_kl_c),
            l_kl_z: mean(|l| l.l_kl_z),
            l_con_c: mean(|l| l.l_con_c),
            l_con_z: mean(|l| l.l_con_z),
            total: mean(|l| l.total),
            seconds,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub wall_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

fn fresh_state(set: &LabeledImageSet, cfg: &TrainConfig) -> Result<(ModelParams<f32>, AdamState)> {
    let arch = cfg.arch_for(set.height(), set.width(), set.channels())?;
    let params = init_params::<f32>(&arch, cfg.seed)?;
    let state = AdamState::zeros_like(&params);
    Ok((params, state))
}

fn config_value(cfg: &TrainConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn read_step_log(path: &std::path::Path, before_step: u64) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)?;
        if rec.step < before_step {
            out.push(rec);
        }
    }
    ensure!(
        out.len() as u64 == before_step,
        Error::Consistency(format!(
            "{} holds {} records before step {before_step}",
            path.display(),
            out.len()
        ))
    );
    Ok(out)
}

/// Train from scratch. With a run directory, writes the config snapshot,
/// the step log, periodic checkpoints and `model.bin`.
pub fn train(
    set: &LabeledImageSet,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    train_from(set, cfg, run, None)
}

/// Continue the run in `run` from its latest periodic checkpoint, or start
/// fresh if it has none.
pub fn resume(set: &LabeledImageSet, cfg: &TrainConfig, run: &RunDir) -> Result<(ModelParams<f32>, TrainHistory)> {
    let start = match run.latest_checkpoint()? {
        Some((_, path)) => Some(Checkpoint::load(path)?),
        None => None,
    };
    train_from(set, cfg, Some(run), start)
}

fn train_from(
    set: &LabeledImageSet,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
    start: Option<Checkpoint>,
) -> Result<(ModelParams<f32>, TrainHistory)> {
    cfg.validate()?;
    set.validate()?;
    ensure!(
        set.len() >= cfg.batch_size,
        Error::config(format!(
            "dataset of {} images cannot fill a batch of {}",
            set.len(),
            cfg.batch_size
        ))
    );
    let clock = Instant::now();
    let mut history = TrainHistory::default();

    let (mut params, mut state, first_epoch, mut step) = match start {
        Some(ck) => {
            let saved: TrainConfig = serde_json::from_value(ck.config.clone())?;
            ensure!(
                cfg.resumable_from(&saved),
                Error::Consistency("checkpoint was written under a different configuration".into())
            );
            let state = ck
                .optimizer
                .ok_or_else(|| Error::Consistency("checkpoint has no optimizer state".into()))?;
            (ck.params, state, ck.epoch, ck.step)
        }
        None => {
            let (p, s) = fresh_state(set, cfg)?;
            (p, s, 0, 0)
        }
    };
    let want = cfg.arch_for(set.height(), set.width(), set.channels())?;
    ensure!(
        params.arch == want,
        Error::Consistency("checkpoint architecture does not match the dataset and config".into())
    );

    let mut log = match run {
        Some(r) => {
            std::fs::write(r.config_path(), serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(r.config_path(), e))?;
            let path = r.step_log_path();
            history.steps = read_step_log(&path, step)?;
            let mut text = String::new();
            for rec in &history.steps {
                text.push_str(&serde_json::to_string(rec)?);
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let f = std::fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    for e in 0..first_epoch {
        let recs: Vec<StepRecord> = history.steps.iter().filter(|r| r.epoch == e).cloned().collect();
        history.epochs.push(EpochSummary::from_records(e, &recs, 0.0));
    }

    for epoch in first_epoch..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(
            set.len(),
            cfg.batch_size,
            rng::derive(cfg.seed, stream::EPOCH_ORDER, epoch as u64),
            cfg.shuffle,
        )?;
        let first = history.steps.len();
        for indices in order {
            let batch = ImageBatch {
                images: set.images.gather_rows(&indices),
                indices,
            };
            let loss = train_step(&mut params, &mut state, &batch, cfg, lr, step_seed(cfg.seed, step), step)?;
            let rec = StepRecord { epoch, step, lr, loss };
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            history.steps.push(rec);
            step += 1;
        }
        if let Some((w, path)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        let summary = EpochSummary::from_records(epoch, &history.steps[first..], t0.elapsed().as_secs_f64());
        log::info!(
            "epoch {}/{} lr {:.1e} total {:.5} rec {:.5} con_c {:.4} con_z {:.4} ({:.1}s)",
            epoch + 1,
            cfg.epochs,
            lr,
            summary.total,
            summary.l_rec,
            summary.l_con_c,
            summary.l_con_z,
            summary.seconds
        );
        history.epochs.push(summary);

        if let Some(r) = run {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                Checkpoint {
                    params: params.clone(),
                    optimizer: Some(state.clone()),
                    epoch: epoch + 1,
                    step,
                    config: config_value(cfg)?,
                }
                .save(r.checkpoint_path(epoch + 1))?;
            }
        }
    }

    if let Some(r) = run {
        let path = r.model_path();
        Checkpoint {
            params: params.clone(),
            optimizer: Some(state),
            epoch: cfg.epochs.max(first_epoch),
            step,
            config: config_value(cfg)?,
        }
        .save(&path)?;
        history.final_checkpoint = Some(path);
    }
    history.wall_seconds = clock.elapsed().as_secs_f64();
    Ok((params, history))
}
