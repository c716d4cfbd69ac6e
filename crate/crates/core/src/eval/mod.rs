//! Evaluation protocol: latent extraction, linear-probe predictivity (D
//! scores), SAP gaps, mixture clustering and transfer grids.

mod gmm;
mod grid;
mod probe;

pub use gmm::{gmm_cluster, EM_ITERATIONS};
pub use grid::{transfer_grid, TransferGrid};
pub use probe::{d_score, d_score_with, ProbeConfig, MIN_PROBE_ROWS};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImageSet, TransformLabels};
use crate::error::{ensure, Error, Result};
use crate::model::{encode, ModelParams};
use crate::tensor::Tensor;

/// Posterior means of every sample with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    /// `[N × d_c]`
    pub c_means: Tensor<f64>,
    /// `[N × d_z]`
    pub z_means: Tensor<f64>,
    pub content_labels: Vec<u32>,
    pub transform_labels: Option<TransformLabels>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.content_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content_labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        ensure!(
            self.c_means.rows() == n && self.z_means.rows() == n,
            Error::Consistency(format!(
                "table rows disagree: c {}, z {}, labels {n}",
                self.c_means.rows(),
                self.z_means.rows()
            ))
        );
        if let Some(t) = &self.transform_labels {
            ensure!(
                t.values.len() == n * t.factors(),
                Error::Consistency("transform labels do not cover every row".into())
            );
        }
        ensure!(
            self.c_means.all_finite() && self.z_means.all_finite(),
            Error::Metric("latent table holds non-finite codes".into())
        );
        Ok(())
    }

    /// CSV with a header. Factor columns are named `t:{name}:{bins}` so the
    /// bin counts survive a round trip; codes use shortest exact notation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,content");
        let factors = self.transform_labels.as_ref();
        if let Some(t) = factors {
            for (name, bins) in t.names.iter().zip(&t.bins) {
                let _ = write!(s, ",t:{name}:{bins}");
            }
        }
        for j in 0..self.c_means.row_len() {
            let _ = write!(s, ",c{j}");
        }
        for j in 0..self.z_means.row_len() {
            let _ = write!(s, ",z{j}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let _ = write!(s, "{i},{}", self.content_labels[i]);
            if let Some(t) = factors {
                let f = t.factors();
                for v in &t.values[i * f..(i + 1) * f] {
                    let _ = write!(s, ",{v}");
                }
            }
            for v in self.c_means.row(i).iter().chain(self.z_means.row(i)) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| fmt("empty file".into()))?.split(',').collect();
        ensure!(
            header.len() >= 2 && header[0] == "index" && header[1] == "content",
            fmt("header must start with index,content".into())
        );
        let mut names = Vec::new();
        let mut bins = Vec::new();
        let (mut dc, mut dz) = (0, 0);
        for col in &header[2..] {
            if let Some(rest) = col.strip_prefix("t:") {
                let (name, b) = rest.rsplit_once(':').ok_or_else(|| fmt(format!("bad factor column {col}")))?;
                names.push(name.to_string());
                bins.push(b.parse::<usize>().map_err(|_| fmt(format!("bad bin count in {col}")))?);
            } else if col.starts_with('c') {
                dc += 1;
            } else if col.starts_with('z') {
                dz += 1;
            } else {
                return Err(fmt(format!("unknown column {col}")));
            }
        }
        let f = names.len();
        let (mut content, mut factors, mut c, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            ensure!(
                cells.len() == header.len(),
                fmt(format!("row {ln} has {} cells, header has {}", cells.len(), header.len()))
            );
            let int = |s: &str| s.parse::<u32>().map_err(|_| fmt(format!("row {ln}: bad label {s}")));
            let real = |s: &str| s.parse::<f64>().map_err(|_| fmt(format!("row {ln}: bad value {s}")));
            content.push(int(cells[1])?);
            for cell in &cells[2..2 + f] {
                factors.push(int(cell)?);
            }
            for cell in &cells[2 + f..2 + f + dc] {
                c.push(real(cell)?);
            }
            for cell in &cells[2 + f + dc..] {
                z.push(real(cell)?);
            }
        }
        let n = content.len();
        let table = LatentTable {
            c_means: Tensor::new(vec![n, dc], c),
            z_means: Tensor::new(vec![n, dz], z),
            content_labels: content,
            transform_labels: (f > 0).then_some(TransformLabels {
                values: factors,
                bins,
                names,
            }),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Encoder means for every image of `set`.
pub fn embed(params: &ModelParams<f32>, set: &LabeledImageSet) -> Result<LatentTable> {
    let (c, z) = encode(params, &set.images)?;
    let table = LatentTable {
        c_means: c.mean.cast(),
        z_means: z.mean.cast(),
        content_labels: set.content_labels.clone(),
        transform_labels: set.transform_labels.clone(),
    };
    table.validate()?;
    Ok(table)
}

/// Probe scores of one transformation factor axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorScores {
    pub name: String,
    pub bins: usize,
    /// Predictivity of this factor from the transformation code.
    pub d_zz: f64,
    /// Predictivity of this factor from the content code.
    pub d_zc: f64,
    /// Accuracy of guessing uniformly among the bins.
    pub chance: f64,
}

/// `d_ab` is the predictivity of ground truth `a` from code `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub d_cc: f64,
    pub d_cz: f64,
    pub d_zz: Option<f64>,
    pub d_zc: Option<f64>,
    pub sap_c: f64,
    pub sap_z: Option<f64>,
    pub content_chance: f64,
    pub factors: Vec<FactorScores>,
    pub split_seed: u64,
    pub probe: ProbeConfig,
    pub clusters: Option<Vec<usize>>,
}

impl MetricsReport {
    /// Bounds and the exact SAP identities.
    pub fn validate(&self) -> Result<()> {
        let mut scores = vec![self.d_cc, self.d_cz, self.sap_c];
        scores.extend(self.d_zz);
        scores.extend(self.d_zc);
        scores.extend(self.sap_z);
        for f in &self.factors {
            scores.extend([f.d_zz, f.d_zc]);
        }
        ensure!(
            scores.iter().all(|s| (0.0..=1.0).contains(s)),
            Error::Metric(format!("score outside [0, 1] in {scores:?}"))
        );
        ensure!(
            self.sap_c == (self.d_cc - self.d_cz).abs(),
            Error::Metric("sap_c differs from |d_cc - d_cz|".into())
        );
        match (self.d_zz, self.d_zc, self.sap_z) {
            (Some(a), Some(b), Some(s)) => ensure!(
                s == (a - b).abs(),
                Error::Metric("sap_z differs from |d_zz - d_zc|".into())
            ),
            (None, None, None) => {}
            _ => return Err(Error::Metric("transformation scores are partially present".into())),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Assemble a report from probe scores; SAP values follow from the scores.
pub fn report_from_scores(
    d_cc: f64,
    d_cz: f64,
    factors: Vec<FactorScores>,
    content_chance: f64,
    split_seed: u64,
    probe: ProbeConfig,
) -> Result<MetricsReport> {
    let (d_zz, d_zc) = if factors.is_empty() {
        (None, None)
    } else {
        let n = factors.len() as f64;
        (
            Some(factors.iter().map(|f| f.d_zz).sum::<f64>() / n),
            Some(factors.iter().map(|f| f.d_zc).sum::<f64>() / n),
        )
    };
    let report = MetricsReport {
        d_cc,
        d_cz,
        d_zz,
        d_zc,
        sap_c: (d_cc - d_cz).abs(),
        sap_z: d_zz.zip(d_zc).map(|(a, b)| (a - b).abs()),
        content_chance,
        factors,
        split_seed,
        probe,
        clusters: None,
    };
    report.validate()?;
    Ok(report)
}

/// All probe scores of a table. Transformation scores are averaged over
/// factor axes.
pub fn sap(table: &LatentTable, split_seed: u64) -> Result<MetricsReport> {
    sap_with(table, split_seed, &ProbeConfig::default())
}

pub fn sap_with(table: &LatentTable, split_seed: u64, probe: &ProbeConfig) -> Result<MetricsReport> {
    table.validate()?;
    let labels = &table.content_labels;
    let d_cc = d_score_with(&table.c_means, labels, split_seed, probe)?;
    let d_cz = d_score_with(&table.z_means, labels, split_seed, probe)?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut factors = Vec::new();
    if let Some(t) = &table.transform_labels {
        for f in 0..t.factors() {
            let col = t.column(f);
            factors.push(FactorScores {
                name: t.names[f].clone(),
                bins: t.bins[f],
                d_zz: d_score_with(&table.z_means, &col, split_seed, probe)?,
                d_zc: d_score_with(&table.c_means, &col, split_seed, probe)?,
                chance: 1.0 / t.bins[f] as f64,
            });
        }
    }
    report_from_scores(d_cc, d_cz, factors, 1.0 / distinct.len() as f64, split_seed, *probe)
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
