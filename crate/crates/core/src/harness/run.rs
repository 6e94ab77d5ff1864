use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub wallclock_ms: u64,
    /// Logical name -> file.
    pub files: BTreeMap<String, FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub phases: BTreeMap<String, PhaseRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            phases: BTreeMap::new(),
        }
    }

    /// Checks that every referenced file exists with its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (phase, rec) in &self.phases {
            for (name, f) in &rec.files {
                let p = dir.join(&f.path);
                if !p.exists() {
                    return Err(Error::Manifest(format!("{phase}/{name}: {} is missing", f.path)));
                }
                if sha256_file(&p)? != f.sha256 {
                    return Err(Error::Manifest(format!(
                        "{phase}/{name}: {} does not match its recorded hash",
                        f.path
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn file(&self, phase: &str, name: &str) -> Option<&FileRecord> {
        self.phases.get(phase).and_then(|p| p.files.get(name))
    }
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An open run directory.
#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
    _lock: RunLock,
}

impl RunDir {
    /// Opens `dir`, creating it if needed. An existing directory must hold
    /// the same normalized config.
    pub fn open(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let text = config.to_toml()?;
        let cfg_path = dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            let old = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
            if old != text {
                return Err(Error::Config(format!(
                    "{} already holds a run with a different config",
                    dir.display()
                )));
            }
        } else {
            fs::write(&cfg_path, &text).map_err(|e| Error::io(&cfg_path, e))?;
        }
        let man_path = dir.join(MANIFEST_FILE);
        let manifest = if man_path.exists() {
            let m: RunManifest = read_json(&man_path)?;
            m.verify(dir)?;
            m
        } else {
            RunManifest::new(config.hash()?)
        };
        Ok(RunDir {
            dir: dir.to_path_buf(),
            config: config.clone(),
            manifest,
            _lock: lock,
        })
    }

    /// Opens an existing run using its stored config.
    pub fn open_existing(dir: &Path) -> Result<Self> {
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        Self::open(dir, &cfg)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes bytes and returns a manifest record for them.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<FileRecord> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(FileRecord {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<FileRecord> {
        self.write(rel, &serde_json::to_vec(value)?)
    }

    /// Loads a file recorded by an earlier phase, checking its hash.
    pub fn load_json<T: DeserializeOwned>(&self, phase: &str, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read_verified(phase, name)?)?)
    }

    /// Raw bytes of a recorded file, checked against the manifest.
    pub fn read_verified(&self, phase: &str, name: &str) -> Result<Vec<u8>> {
        let rec = self.manifest.file(phase, name).ok_or_else(|| {
            Error::Config(format!(
                "{}: phase `{phase}` has not produced `{name}` yet",
                self.dir.display()
            ))
        })?;
        let p = self.path(&rec.path);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if hex::encode(Sha256::digest(&bytes)) != rec.sha256 {
            return Err(Error::Manifest(format!("{} does not match its recorded hash", rec.path)));
        }
        Ok(bytes)
    }

    pub fn has(&self, phase: &str, name: &str) -> bool {
        self.manifest.file(phase, name).is_some()
    }

    pub fn record_phase(&mut self, phase: &str, rec: PhaseRecord) -> Result<()> {
        self.manifest.phases.insert(phase.to_string(), rec);
        let p = self.path(MANIFEST_FILE);
        let body = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
