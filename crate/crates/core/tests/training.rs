//! End-to-end training behaviour on small shapes sets.

use dualcontrast::checkpoint::{AdamState, Checkpoint};
use dualcontrast::datasets::{gen_shapes, ImageBatch, LabeledImageSet, ShapeGenConfig};
use dualcontrast::eval::{d_score, embed};
use dualcontrast::model::{init_params, reconstruct};
use dualcontrast::trainer::*;
use dualcontrast::Error;

fn shapes(n_per_cell: usize) -> LabeledImageSet {
    gen_shapes(&ShapeGenConfig {
        n_per_cell,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 20,
        d_c: 3,
        d_z: 3,
        decoder_hidden: vec![32; 4],
        seed: 5,
        ..Default::default()
    }
}

fn read(path: impl AsRef<std::path::Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn epochs_drop_the_partial_batch() {
    let set = shapes(6);
    assert_eq!(set.len(), 960);
    let cfg = TrainConfig {
        batch_size: 100,
        ..small_cfg()
    };
    let (_, h) = train(&set, &cfg, None).unwrap();
    assert_eq!(h.steps.len(), 18);
    assert_eq!(h.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(), vec![9, 9]);
    assert_eq!(h.steps.last().unwrap().step, 17);
}

#[test]
fn identical_runs_write_identical_artefacts() {
    let set = shapes(1);
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..small_cfg()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = RunDir::open(d.path()).unwrap();
        train(&set, &cfg, Some(&run)).unwrap();
    }
    for name in [MODEL_FILE, STEP_LOG_FILE, CONFIG_FILE, "ckpt_1.bin", "ckpt_2.bin"] {
        assert!(read(dirs[0].path().join(name)) == read(dirs[1].path().join(name)), "{name} differs");
    }
    assert!(!dirs[0].path().join(LOCK_FILE).exists());
}

#[test]
fn seeds_are_isolated() {
    let set = shapes(1);
    let (_, a) = train(&set, &small_cfg(), None).unwrap();
    let (_, b) = train(&set, &TrainConfig { seed: 6, ..small_cfg() }, None).unwrap();
    assert_ne!(a.steps[0].loss, b.steps[0].loss);
}

#[test]
fn checkpointing_does_not_perturb_the_run() {
    let set = shapes(1);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::open(dir.path()).unwrap();
    let (p1, h1) = train(&set, &TrainConfig { checkpoint_every: 1, ..small_cfg() }, Some(&run)).unwrap();
    let (p2, h2) = train(&set, &small_cfg(), None).unwrap();
    assert_eq!(h1.steps, h2.steps);
    assert_eq!(p1, p2);
}

#[test]
fn disabled_terms_log_zero() {
    let set = shapes(1);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::open(dir.path()).unwrap();
    let cfg = TrainConfig {
        ablation: Ablation::VaeOnly,
        ..small_cfg()
    };
    train(&set, &cfg, Some(&run)).unwrap();
    let text = String::from_utf8(read(run.step_log_path())).unwrap();
    let recs: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 16);
    for r in &recs {
        assert_eq!((r.loss.l_con_c, r.loss.l_con_z), (0.0, 0.0));
        assert!(r.loss.l_rec > 0.0);
    }
}

#[test]
fn resumed_run_matches_a_straight_run() {
    let set = shapes(1);
    let cfg = TrainConfig {
        epochs: 5,
        checkpoint_every: 2,
        ..small_cfg()
    };
    let straight = tempfile::tempdir().unwrap();
    {
        let run = RunDir::open(straight.path()).unwrap();
        train(&set, &cfg, Some(&run)).unwrap();
    }

    // interrupted after three epochs: ckpt_2 exists, the log runs past it
    let broken = tempfile::tempdir().unwrap();
    {
        let run = RunDir::open(broken.path()).unwrap();
        train(&set, &TrainConfig { epochs: 3, ..cfg.clone() }, Some(&run)).unwrap();
        std::fs::remove_file(run.model_path()).unwrap();
    }
    let run = RunDir::open(broken.path()).unwrap();
    let (_, h) = resume(&set, &cfg, &run).unwrap();
    assert_eq!(h.steps.len(), 40);
    for name in [MODEL_FILE, STEP_LOG_FILE, "ckpt_4.bin"] {
        assert!(read(straight.path().join(name)) == read(broken.path().join(name)), "{name} differs");
    }
    // the interrupted run stored its own epoch budget in ckpt_2
    let a = Checkpoint::load(straight.path().join("ckpt_2.bin")).unwrap();
    let b = Checkpoint::load(broken.path().join("ckpt_2.bin")).unwrap();
    assert_eq!((a.params, a.optimizer, a.step), (b.params, b.optimizer, b.step));

    let other = TrainConfig {
        gamma_c: 0.5,
        ..cfg
    };
    assert!(matches!(resume(&set, &other, &run), Err(Error::Consistency(_))));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _held = RunDir::open(dir.path()).unwrap();
    assert!(matches!(RunDir::open(dir.path()), Err(Error::Consistency(_))));
}

#[test]
fn loss_falls_over_the_first_hundred_steps() {
    let set = shapes(3);
    let cfg = TrainConfig {
        epochs: 5,
        ..small_cfg()
    };
    let (_, h) = train(&set, &cfg, None).unwrap();
    assert_eq!(h.steps.len(), 120);
    let avg = |r: std::ops::Range<usize>| h.steps[r.clone()].iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (avg(0..10), avg(90..100));
    assert!(tail < head, "moving average rose from {head} to {tail}");
}

#[test]
fn reconstructions_track_the_training_error() {
    let set = shapes(3);
    let cfg = TrainConfig {
        epochs: 4,
        ablation: Ablation::VaeOnly,
        ..small_cfg()
    };
    let (params, h) = train(&set, &cfg, None).unwrap();
    let x_hat = reconstruct(&params, &set.images).unwrap();
    let mse = set
        .images
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / set.images.len() as f64;
    // the logged reconstruction term sums the two views
    let per_view = h.epochs.last().unwrap().l_rec / 2.0;
    assert!(mse < 1.5 * per_view, "reconstruction MSE {mse} vs per-view training error {per_view}");
}

#[test]
fn heavy_transformation_prior_leaves_z_uninformative() {
    let set = shapes(6);
    let cfg = TrainConfig {
        epochs: 3,
        gamma_c: 0.0,
        gamma_z: 50.0,
        ablation: Ablation::VaeOnly,
        ..small_cfg()
    };
    let (params, _) = train(&set, &cfg, None).unwrap();
    let t = embed(&params, &set).unwrap();
    let chance = 1.0 / set.num_classes as f64;
    let d_cz = d_score(&t.z_means, &t.content_labels, 0).unwrap();
    assert!(d_cz < chance + 0.1, "content predictable from z at {d_cz}");
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let set = shapes(1);
    let cfg = small_cfg();
    let arch = cfg.arch_for(28, 28, 1).unwrap();
    let mut params = init_params::<f32>(&arch, 0).unwrap();
    params.decoder[0].weight.data[0] = f32::NAN;
    let mut state = AdamState::zeros_like(&params);
    let batch = ImageBatch {
        images: set.images.gather_rows(&[0, 1, 2, 3]),
        indices: vec![0, 1, 2, 3],
    };
    let before = params.clone();
    let err = train_step(&mut params, &mut state, &batch, &cfg, 1e-4, 0, 42).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 42, .. }), "{err}");
    // the failed step leaves the state untouched
    assert_eq!(params.decoder[1], before.decoder[1]);
    assert_eq!(state.t, 0);
}

#[test]
fn a_single_step_is_a_pure_function() {
    let set = shapes(1);
    let cfg = small_cfg();
    let arch = cfg.arch_for(28, 28, 1).unwrap();
    let batch = ImageBatch {
        images: set.images.gather_rows(&[3, 9, 27, 81]),
        indices: vec![3, 9, 27, 81],
    };
    let run = || {
        let mut p = init_params::<f32>(&arch, 1).unwrap();
        let mut s = AdamState::zeros_like(&p);
        let l = train_step(&mut p, &mut s, &batch, &cfg, 1e-3, 77, 0).unwrap();
        (p, s, l)
    };
    let (p1, s1, l1) = run();
    let (p2, s2, l2) = run();
    assert_eq!((p1.clone(), s1.clone(), l1), (p2, s2, l2));
    assert_eq!(s1.t, 1);
    let ck = Checkpoint {
        params: p1,
        optimizer: Some(s1),
        epoch: 0,
        step: 1,
        config: serde_json::to_value(&cfg).unwrap(),
    };
    assert_eq!(ck.to_bytes().unwrap(), ck.clone().to_bytes().unwrap());
}
