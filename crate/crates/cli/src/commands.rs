//! The four operator commands. Each writes the configuration snapshot into
//! its output directory before anything else.

use std::path::{Path, PathBuf};

use dualcontrast::checkpoint::load_params;
use dualcontrast::datasets::{write_dcset, LabeledImageSet};
use dualcontrast::eval::{embed, gmm_cluster, sap_with, transfer_grid, MetricsReport, ProbeConfig};
use dualcontrast::rng;
use dualcontrast::trainer::{self, RunDir, MODEL_FILE};
use log::info;
use rand::seq::SliceRandom;

use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::error::{CliError, Result};

pub const DATASET_FILE: &str = "dataset.dcset";
pub const METRICS_FILE: &str = "metrics.json";
pub const LATENTS_FILE: &str = "latents.csv";
pub const GRID_FILE: &str = "grid.png";

const GRID_STREAM: u64 = 100;

/// Materialise the configured dataset as a `DCSET1` container in the
/// output directory, which must already exist.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    cfg.write_snapshot(out)?;
    let set = cfg.load_dataset()?;
    let path = out.join(DATASET_FILE);
    write_dcset(&set, &path)?;
    info!("wrote {} images to {}", set.len(), path.display());
    Ok(path)
}

/// Train into the output directory. Without `resume` the directory must not
/// already hold a run.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let run = RunDir::open(out)?;
    if !resume && (run.model_path().exists() || run.step_log_path().exists()) {
        return Err(CliError::Config(format!(
            "{} already holds a run; pass --resume or choose another output directory",
            out.display()
        )));
    }
    cfg.write_snapshot(out)?;
    let set = cfg.load_dataset()?;
    info!(
        "training {} on {} ({} images), {} epochs",
        cfg.train.ablation,
        set.name,
        set.len(),
        cfg.train.epochs
    );
    let (_, history) = if resume {
        trainer::resume(&set, &cfg.train, &run)?
    } else {
        trainer::train(&set, &cfg.train, Some(&run))?
    };
    if let Some(last) = history.epochs.last() {
        info!("final epoch loss {:.5} (reconstruction {:.5})", last.total, last.l_rec);
    }
    Ok(run.model_path())
}

/// Configuration stored with a run, or an error naming the missing file.
pub fn run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join(SNAPSHOT_FILE);
    if !path.exists() {
        return Err(CliError::Config(format!("no run configuration at {}", path.display())));
    }
    RunConfig::load(path)
}

fn load_model(run_dir: &Path) -> Result<dualcontrast::model::ModelParams<f32>> {
    let path = run_dir.join(MODEL_FILE);
    if !path.exists() {
        return Err(CliError::Config(format!("no trained model at {}", path.display())));
    }
    Ok(load_params(path)?)
}

/// Probe scores, optional clustering and the latent table of a trained run.
/// `data` replaces the run's own dataset when given.
pub fn eval(run_dir: &Path, data: Option<&RunConfig>, out: Option<&Path>) -> Result<MetricsReport> {
    let run_cfg = run_config(run_dir)?;
    let params = load_model(run_dir)?;
    let mut cfg = data.cloned().unwrap_or_else(|| run_cfg.clone());
    cfg.train = run_cfg.train;
    let out = out.unwrap_or(run_dir);
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    if out != run_dir {
        cfg.write_snapshot(out)?;
    }
    let set = cfg.load_dataset()?;
    let table = embed(&params, &set)?;
    let mut report = sap_with(&table, cfg.eval.probe_seed, &ProbeConfig::default())?;
    if cfg.eval.gmm_k > 0 {
        report.clusters = Some(gmm_cluster(&table.c_means, cfg.eval.gmm_k, cfg.eval.probe_seed)?);
    }
    report.save(out.join(METRICS_FILE))?;
    table.save_csv(out.join(LATENTS_FILE))?;
    info!(
        "D(c|c) {:.3} D(c|z) {:.3} SAP(c) {:.3}",
        report.d_cc, report.d_cz, report.sap_c
    );
    Ok(report)
}

/// `rows + cols` distinct dataset rows in a seeded random order, split
/// into the row sources and the column sources.
fn pick(set: &LabeledImageSet, rows: usize, cols: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if rows + cols > set.len() {
        return Err(CliError::Config(format!(
            "a {rows}x{cols} grid needs {} images, the dataset has {}",
            rows + cols,
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, GRID_STREAM, 0)));
    Ok((order[..rows].to_vec(), order[rows..rows + cols].to_vec()))
}

/// Transfer grid over randomly chosen dataset images (seeded by
/// `probe_seed`): rows give the transformation, columns the content.
pub fn grid(run_dir: &Path, rows: Option<usize>, cols: Option<usize>, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = run_config(run_dir)?;
    let params = load_model(run_dir)?;
    let (r, s) = (rows.unwrap_or(cfg.eval.grid_rows), cols.unwrap_or(cfg.eval.grid_cols));
    if r == 0 || s == 0 {
        return Err(CliError::Config("grid needs at least one row and one column".into()));
    }
    let set = cfg.load_dataset()?;
    let (ri, ci) = pick(&set, r, s, cfg.eval.probe_seed)?;
    let g = transfer_grid(&params, &set.images.gather_rows(&ri), &set.images.gather_rows(&ci))?;
    let path = out.map_or_else(|| run_dir.join(GRID_FILE), Path::to_path_buf);
    g.save_png(&path)?;
    info!("wrote {}x{} grid to {}", g.rows, g.cols, path.display());
    Ok(path)
}
