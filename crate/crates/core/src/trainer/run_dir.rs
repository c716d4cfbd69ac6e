//! Run directory layout and its single-writer lock.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.json";
pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const MODEL_FILE: &str = "model.bin";

/// An exclusively held run directory. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Create (or reopen) `path` and take its lock. Fails if another
    /// process holds the lock.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Consistency(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    path.display(),
                    lock.display()
                ))
            } else {
                Error::io(&lock, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }

    pub fn step_log_path(&self) -> PathBuf {
        self.path.join(STEP_LOG_FILE)
    }

    pub fn model_path(&self) -> PathBuf {
        self.path.join(MODEL_FILE)
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.path.join(format!("ckpt_{epoch}.bin"))
    }

    /// The periodic checkpoint with the highest epoch, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        let mut best: Option<(usize, PathBuf)> = None;
        let entries = std::fs::read_dir(&self.path).map_err(|e| Error::io(&self.path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.path, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let epoch = name
                .strip_prefix("ckpt_")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(e) = epoch {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, entry.path()));
                }
            }
        }
        Ok(best)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(LOCK_FILE));
    }
}
