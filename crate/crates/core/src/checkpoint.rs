//! Flat key→tensor checkpoint archive.
//!
//! Layout: the 8-byte magic `DCCKPT1\n`, a little-endian `u64` header
//! length, a JSON header (architecture, progress counters, opaque config and
//! a tensor index), then every tensor's f32 values in little-endian order.
//! The encoding is a pure function of the contents, so equal training states
//! give byte-identical files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ArchConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCCKPT1\n";

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// First and second moment estimates, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams<f32>) -> Self {
        let z: Vec<Tensor<f32>> = params
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape.clone()))
            .collect();
        AdamState {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: u64,
    /// Training configuration, stored verbatim.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    epoch: usize,
    step: u64,
    adam_t: Option<u64>,
    config: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.named();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        if let Some(opt) = &self.optimizer {
            ensure!(
                opt.m.len() == names.len() && opt.v.len() == names.len(),
                Error::Consistency("optimizer state does not match the parameters".into())
            );
            for (n, t) in names.iter().zip(&opt.m) {
                tensors.push((format!("{ADAM_M}{n}"), t));
            }
            for (n, t) in names.iter().zip(&opt.v) {
                tensors.push((format!("{ADAM_V}{n}"), t));
            }
        }
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            arch: self.params.arch.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        ensure!(
            bytes.len() >= 16 && &bytes[..8] == CHECKPOINT_MAGIC,
            fmt("not a checkpoint archive")
        );
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        ensure!(bytes.len() >= 16 + hlen, fmt("header truncated"));
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        let data = &bytes[16 + hlen..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        ensure!(
            data.len() == total * 4,
            Error::Consistency(format!(
                "{}: tensor index covers {} bytes, payload has {}",
                path.display(),
                total * 4,
                data.len()
            ))
        );
        let mut map: HashMap<String, Tensor<f32>> = HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            ensure!(
                (e.offset + n) * 4 <= data.len(),
                Error::Consistency(format!("tensor {} lies outside the payload", e.name))
            );
            let vals = data[e.offset * 4..(e.offset + n) * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            map.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals));
        }
        let params = ModelParams::from_named(&header.arch, |n| map.remove(n))?;
        let optimizer = match header.adam_t {
            Some(t) => {
                let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
                let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                    names
                        .iter()
                        .map(|n| {
                            map.remove(&format!("{prefix}{n}"))
                                .ok_or_else(|| Error::Consistency(format!("missing optimizer tensor {prefix}{n}")))
                        })
                        .collect()
                };
                let m = take(ADAM_M)?;
                let v = take(ADAM_V)?;
                Some(AdamState { t, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            params,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write-then-rename so a crash never leaves a half-written archive.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Load only the model weights from a checkpoint file.
pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    Ok(Checkpoint::load(path)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn arch() -> ArchConfig {
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

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let params = init_params::<f32>(&arch(), 5).unwrap();
        let mut opt = AdamState::zeros_like(&params);
        opt.t = 17;
        opt.m[0].data[0] = 0.25;
        opt.v[2].data[1] = 2.5;
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: Some(opt),
            epoch: 3,
            step: 42,
            config: serde_json::json!({"seed": 1}),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert_eq!(std::fs::read(&p).unwrap(), ck.to_bytes().unwrap());

        let bare = Checkpoint {
            optimizer: None,
            ..ck
        };
        let back = Checkpoint::from_bytes(&bare.to_bytes().unwrap(), &p).unwrap();
        assert_eq!(back, bare);
        assert_eq!(load_params(&p).unwrap(), params);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let params = init_params::<f32>(&arch(), 5).unwrap();
        let ck = Checkpoint {
            params,
            optimizer: None,
            epoch: 0,
            step: 0,
            config: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x.bin");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(b"garbage!garbage!", p), Err(Error::Format { .. })));
    }
}
