//! Persistent score cache keyed by (canonical key, oracle name).
//!
//! Records are appended as: u32 key length, key bytes, u32 name length,
//! name bytes, f64 score, all little-endian.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use limo_chem::{canonical_key, MolGraph};
use log::warn;

use super::{Direction, ItemScore, PropertyOracle};
use crate::error::Result;

#[derive(Debug)]
pub struct OracleCache {
    path: PathBuf,
    entries: Mutex<HashMap<(String, String), f64>>,
    file: Mutex<File>,
}

fn read_chunk(r: &mut impl Read, len: usize) -> Option<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).ok()?;
    Some(buf)
}

fn read_str(r: &mut impl Read) -> Option<String> {
    let len = u32::from_le_bytes(read_chunk(r, 4)?.try_into().ok()?) as usize;
    String::from_utf8(read_chunk(r, len)?).ok()
}

fn read_record(r: &mut impl Read) -> Option<(String, String, f64)> {
    let key = read_str(r)?;
    let name = read_str(r)?;
    let score = f64::from_le_bytes(read_chunk(r, 8)?.try_into().ok()?);
    Some((key, name, score))
}

fn encode_record(key: &str, name: &str, score: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(key.len() + name.len() + 16);
    for s in [key, name] {
        out.extend((s.len() as u32).to_le_bytes());
        out.extend(s.as_bytes());
    }
    out.extend(score.to_le_bytes());
    out
}

impl OracleCache {
    /// Opens or creates the cache file. A truncated trailing record is dropped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut r = BufReader::new(File::open(path)?);
            let mut consumed = 0u64;
            while let Some((key, name, score)) = read_record(&mut r) {
                consumed += (key.len() + name.len() + 16) as u64;
                valid_len = consumed;
                entries.insert((key, name), score);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != valid_len {
            warn!("oracle cache {}: dropping truncated tail", path.display());
            file.set_len(valid_len)?;
        }
        Ok(OracleCache {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str, oracle: &str) -> Option<f64> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(key.to_string(), oracle.to_string()))
            .copied()
    }

    pub fn insert(&self, key: &str, oracle: &str, score: f64) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.insert((key.to_string(), oracle.to_string()), score) == Some(score) {
            return Ok(());
        }
        let mut file = self.file.lock().expect("cache lock");
        file.write_all(&encode_record(key, oracle, score))?;
        file.flush()?;
        Ok(())
    }
}

/// Wraps an oracle so repeated molecules are served from the cache.
pub struct CachedOracle<O> {
    inner: O,
    cache: Arc<OracleCache>,
}

impl<O: PropertyOracle> CachedOracle<O> {
    pub fn new(inner: O, cache: Arc<OracleCache>) -> Self {
        CachedOracle { inner, cache }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: PropertyOracle> PropertyOracle for CachedOracle<O> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn direction(&self) -> Direction {
        self.inner.direction()
    }

    fn score_batch(&self, mols: &[MolGraph]) -> Result<Vec<ItemScore>> {
        let name = self.inner.name();
        let keys: Vec<String> = mols.iter().map(canonical_key).collect();
        let mut out: Vec<Option<ItemScore>> = keys
            .iter()
            .map(|k| self.cache.get(k, name).map(Ok))
            .collect();
        let misses: Vec<usize> = (0..mols.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let batch: Vec<MolGraph> = misses.iter().map(|&i| mols[i].clone()).collect();
            let scored = self.inner.score_batch(&batch)?;
            for (&i, s) in misses.iter().zip(scored) {
                if let Ok(v) = s {
                    self.cache.insert(&keys[i], name, v)?;
                }
                out[i] = Some(s);
            }
        }
        Ok(out.into_iter().map(|s| s.expect("filled")).collect())
    }
}
