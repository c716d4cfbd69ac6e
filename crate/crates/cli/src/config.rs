//! Run configuration: one flat TOML file holding the training keys, the
//! dataset source, evaluation options and the output directory.
//!
//! ```toml
//! data_source = "idx"
//! idx_images = "data/mnist10k/train-images-idx3-ubyte.gz"
//! idx_labels = "data/mnist10k/train-labels-idx1-ubyte.gz"
//! epochs = 40
//! ablation = "full"
//! out = "runs/mnist_full"
//! ```
//!
//! Relative paths resolve against the directory of the config file. The
//! snapshot written into every output directory stores them resolved.

use std::path::{Path, PathBuf};

use dualcontrast::datasets::{gen_shapes, load_idx, read_dcset, LabeledImageSet, ShapeGenConfig};
use dualcontrast::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File name of the configuration snapshot in an output directory.
pub const SNAPSHOT_FILE: &str = "run.toml";

const DATA_KEYS: &[&str] = &["data_source", "idx_images", "idx_labels", "dcset_path", "shapes", "limit"];
const EVAL_KEYS: &[&str] = &["probe_seed", "gmm_k", "grid_rows", "grid_cols"];
const OUT_KEY: &str = "out";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Shapes,
    Idx,
    Dcset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub data_source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcset_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shapes: Option<ShapeGenConfig>,
    /// Keep only the first `limit` images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the probe train/test split and of the mixture fit.
    pub probe_seed: u64,
    /// Mixture components for clustering content codes; 0 skips clustering.
    pub gmm_k: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe_seed: 0,
            gmm_k: 0,
            grid_rows: 10,
            grid_cols: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

fn take(table: &mut toml::Table, keys: &[&str]) -> toml::Table {
    keys.iter()
        .filter_map(|k| table.remove(*k).map(|v| (k.to_string(), v)))
        .collect()
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
}

impl RunConfig {
    /// Parse config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let parse_err = |source| CliError::Parse {
            path: path.to_path_buf(),
            source,
        };
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let data: DataConfig = take(&mut table, DATA_KEYS).try_into().map_err(parse_err)?;
        let eval: EvalConfig = take(&mut table, EVAL_KEYS).try_into().map_err(parse_err)?;
        let out = match table.remove(OUT_KEY) {
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(other) => return Err(CliError::Config(format!("`out` must be a path string, got {other}"))),
            None => None,
        };
        let train: TrainConfig = table.try_into().map_err(parse_err)?;
        let mut cfg = RunConfig { data, eval, train, out };
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.idx_images);
        fix(&mut self.data.idx_labels);
        fix(&mut self.data.dcset_path);
        fix(&mut self.out);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let (idx, dcset) = (d.idx_images.is_some() || d.idx_labels.is_some(), d.dcset_path.is_some());
        let ok = match d.data_source {
            DataSource::Shapes => !idx && !dcset,
            DataSource::Idx => d.idx_images.is_some() && d.idx_labels.is_some() && !dcset && d.shapes.is_none(),
            DataSource::Dcset => dcset && !idx && d.shapes.is_none(),
        };
        if !ok {
            return Err(CliError::Config(format!(
                "data_source = {:?} needs exactly its own keys: shapes takes an optional [shapes] table, \
                 idx takes idx_images and idx_labels, dcset takes dcset_path",
                d.data_source
            )));
        }
        if d.limit == Some(0) {
            return Err(CliError::Config("limit must be positive".into()));
        }
        if let Some(s) = &d.shapes {
            s.validate()?;
        }
        if self.eval.grid_rows == 0 || self.eval.grid_cols == 0 {
            return Err(CliError::Config("grid_rows and grid_cols must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// The flat TOML form; parsing it back gives the same config.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = to_table(&self.train)?;
        table.extend(to_table(&self.data)?);
        table.extend(to_table(&self.eval)?);
        if let Some(out) = &self.out {
            table.insert(OUT_KEY.into(), toml::Value::String(out.to_string_lossy().into_owned()));
        }
        toml::to_string(&table).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
    }

    /// Output directory, required by every command that writes.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: set `out` or pass --out".into()))
    }

    pub fn load_dataset(&self) -> Result<LabeledImageSet> {
        let d = &self.data;
        let set = match d.data_source {
            DataSource::Shapes => gen_shapes(&d.shapes.clone().unwrap_or_default())?,
            DataSource::Idx => load_idx(d.idx_images.as_ref().unwrap(), d.idx_labels.as_ref().unwrap())?,
            DataSource::Dcset => read_dcset(d.dcset_path.as_ref().unwrap())?,
        };
        Ok(match d.limit {
            Some(n) if n < set.len() => set.take(n),
            _ => set,
        })
    }

    /// Write the snapshot into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualcontrast::trainer::Ablation;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("t.toml"), Path::new("/base"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.train.gamma_c, c.train.base_lr, c.train.batch_size), (0.01, 1e-4, 100));
    }

    #[test]
    fn keys_land_in_their_sections() {
        let c = parse(
            "data_source = \"idx\"\nidx_images = \"a.gz\"\nidx_labels = \"/abs/b.gz\"\n\
             epochs = 3\nablation = \"neg_only\"\ngmm_k = 4\nout = \"runs/x\"\n\
             [transform]\nkind = \"rotation\"\nmin = 0.0\nmax = 90.0\n",
        )
        .unwrap();
        assert_eq!(c.data.idx_images.unwrap(), PathBuf::from("/base/a.gz"));
        assert_eq!(c.data.idx_labels.unwrap(), PathBuf::from("/abs/b.gz"));
        assert_eq!((c.train.epochs, c.train.ablation), (3, Ablation::NegOnly));
        assert_eq!(c.train.transform.max, 90.0);
        assert_eq!(c.eval.gmm_k, 4);
        assert_eq!(c.out.unwrap(), PathBuf::from("/base/runs/x"));
    }

    #[test]
    fn snapshot_round_trips() {
        let c = parse("seed = 9\ngrid_rows = 3\n[shapes]\nn_per_cell = 2\nclasses = 3\n").unwrap();
        let back = parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_mixed_sources_are_config_errors() {
        let e = parse("epoch = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = parse("data_source = \"shapes\"\ndcset_path = \"x\"\n").unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        let e = parse("data_source = \"idx\"\nidx_images = \"x\"\n").unwrap_err();
        assert!(matches!(e, CliError::Config(_)));
        assert_eq!(parse("batch_size = 1\n").unwrap_err().exit_code(), 2);
    }
}
