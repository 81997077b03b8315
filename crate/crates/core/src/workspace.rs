//! Work-directory bookkeeping for the CLI: a lockfile, run ids and the
//! `latest.json` index of the newest output of each kind.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{LimoError, Result};

pub const LOCK_FILE: &str = ".limo.lock";
pub const LATEST_FILE: &str = "latest.json";

/// Exclusive hold on a work directory, released on drop.
#[derive(Debug)]
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(WorkLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(LimoError::InvalidInput(format!(
                    "work directory is in use ({} exists; remove it if no command is running)",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Accumulates everything that determines a command's outputs.
#[derive(Debug, Clone, Default)]
pub struct RunId {
    hasher: Sha256,
}

impl RunId {
    pub fn new(command: &str) -> Self {
        let mut id = RunId::default();
        id.field("command", command);
        id
    }

    pub fn field(&mut self, name: &str, value: &str) -> &mut Self {
        for part in [name, value] {
            self.hasher.update((part.len() as u64).to_le_bytes());
            self.hasher.update(part.as_bytes());
        }
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let digest = file_digest(path)?;
        Ok(self.field(name, &digest))
    }

    /// First 16 hex digits of the digest.
    pub fn finish(&self) -> String {
        hex::encode(self.hasher.clone().finalize())[..16].to_string()
    }
}

/// Named outputs of earlier commands, as file names inside the work directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Latest {
    entries: BTreeMap<String, String>,
}

impl Latest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(LATEST_FILE);
        if !path.exists() {
            return Ok(Latest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let entries = serde_json::from_str(&text)
            .map_err(|e| LimoError::InvalidInput(format!("{}: {e}", path.display())))?;
        Ok(Latest { entries })
    }

    pub fn get(&self, dir: &Path, name: &str) -> Option<PathBuf> {
        self.entries.get(name).map(|f| dir.join(f))
    }

    /// Records `file` under `name` and rewrites the index.
    pub fn record(&mut self, dir: &Path, name: &str, file: &Path) -> Result<()> {
        let rel = file.strip_prefix(dir).unwrap_or(file);
        self.entries
            .insert(name.to_string(), rel.to_string_lossy().into_owned());
        let body = serde_json::to_string_pretty(&self.entries).expect("index serializes") + "\n";
        let tmp = dir.join(format!("{LATEST_FILE}.tmp"));
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, dir.join(LATEST_FILE))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkLock::acquire(dir.path()).unwrap();
        assert!(WorkLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(WorkLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn run_id_depends_on_every_field() {
        let base = RunId::new("sample").field("seed", "7").finish();
        assert_eq!(base, RunId::new("sample").field("seed", "7").finish());
        assert_ne!(base, RunId::new("sample").field("seed", "8").finish());
        assert_ne!(base, RunId::new("optimize").field("seed", "7").finish());
        // Length prefixes keep field boundaries distinct.
        assert_ne!(
            RunId::new("x").field("ab", "c").finish(),
            RunId::new("x").field("a", "bc").finish()
        );
        assert_eq!(base.len(), 16);
    }

    #[test]
    fn latest_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut latest = Latest::load(dir.path()).unwrap();
        latest
            .record(dir.path(), "vae", &dir.path().join("vae-1.limo"))
            .unwrap();
        let back = Latest::load(dir.path()).unwrap();
        assert_eq!(
            back.get(dir.path(), "vae"),
            Some(dir.path().join("vae-1.limo"))
        );
        assert_eq!(back.get(dir.path(), "corpus"), None);
    }
}
