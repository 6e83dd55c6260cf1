//! Content-addressed on-disk reply cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::LlmError;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    reply: String,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(DiskCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// `Ok(None)` on a miss; `Err(Cache)` when the entry exists but cannot be trusted.
    pub fn get(&self, key: &str) -> Result<Option<String>, LlmError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(LlmError::Io { path, source }),
        };
        let entry: Entry = serde_json::from_slice(&bytes).map_err(|e| LlmError::Cache {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if entry.key != key {
            return Err(LlmError::Cache {
                path,
                reason: format!("entry key {} does not match file name", entry.key),
            });
        }
        Ok(Some(entry.reply))
    }

    /// Write-then-rename so concurrent readers never see a partial entry.
    pub fn put(&self, key: &str, reply: &str) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let io_err = |source| LlmError::Io {
            path: path.clone(),
            source,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_err)?;
        let body = serde_json::to_vec(&Entry {
            key: key.to_string(),
            reply: reply.to_string(),
        })
        .expect("cache entry serializes");
        tmp.write_all(&body).map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        Ok(())
    }
}
