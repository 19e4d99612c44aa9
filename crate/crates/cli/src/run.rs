//! Run directory state: the manifest and the lock file.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use edgeshift::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "run.json";
pub const CONFIG_ECHO: &str = "config.toml";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Checkpoint used downstream, relative to the run directory.
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub data: PathBuf,
    pub config: TrainConfig,
    pub warmup: Option<StageRecord>,
    pub selected_epoch: Option<usize>,
    pub psl: Option<StageRecord>,
    pub joint: Option<StageRecord>,
    pub correction: Option<StageRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(run: &Path, data: PathBuf, config: TrainConfig) -> Self {
        let name = run.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
        Self {
            run_id: format!("{name}-seed{}", config.seed),
            data,
            config,
            warmup: None,
            selected_epoch: None,
            psl: None,
            joint: None,
            correction: None,
            metrics: BTreeMap::new(),
        }
    }

    pub fn load(run: &Path) -> CliResult<Self> {
        let path = run.join(MANIFEST);
        if !path.exists() {
            return Err(CliError::Refused(format!(
                "{} has no run manifest; run `edgeshift warmup --data DIR --out {}` first",
                run.display(),
                run.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| edgeshift::Error::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(edgeshift::Error::from)?)
    }

    /// Writes the manifest and echoes the effective configuration.
    pub fn save(&self, run: &Path) -> CliResult<()> {
        let path = run.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(edgeshift::Error::from)?;
        fs::write(&path, text).map_err(|e| edgeshift::Error::io(&path, e))?;
        crate::config::write_toml(&self.config, &run.join(CONFIG_ECHO))
    }
}

/// Exclusive claim on a directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| edgeshift::Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Refused(format!(
                "{} is locked by another command (remove {} if it crashed)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(edgeshift::Error::io(&path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// True when `dir` exists and holds anything besides a lock file.
pub fn has_content(dir: &Path) -> bool {
    fs::read_dir(dir).map_or(false, |mut it| it.any(|e| e.map_or(true, |e| e.file_name() != LOCK)))
}

/// Removes everything in `dir` except the lock file.
pub fn clear(dir: &Path) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| edgeshift::Error::io(dir, e))? {
        let entry = entry.map_err(|e| edgeshift::Error::io(dir, e))?;
        if entry.file_name() == LOCK {
            continue;
        }
        let p = entry.path();
        let res = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
        res.map_err(|e| edgeshift::Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(CliError::Refused(_))));
        assert!(!has_content(dir.path()));
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new(dir.path(), "data".into(), TrainConfig::default());
        m.metrics.insert("x".into(), 1.5);
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
        assert!(dir.path().join(CONFIG_ECHO).exists());
    }
}
