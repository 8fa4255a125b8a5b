//! Append-only, content-addressed replay cache.
//!
//! Each line is `{key, prompt_hash, kind, value}` where `key` is the SHA-256
//! of the full request (kind, model, prompt, decode settings or
//! continuation) and `prompt_hash` is the SHA-256 of the prompt alone.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Complete,
    Loglik,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Complete => "complete",
            EntryKind::Loglik => "loglik",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub prompt_hash: String,
    pub kind: EntryKind,
    pub value: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a canonical JSON rendering of the request.
pub fn request_key(request: &serde_json::Value) -> String {
    sha256_hex(request.to_string().as_bytes())
}

#[derive(Debug, Default)]
pub struct ReplayCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a cache file. Later lines win on duplicate
    /// keys; a truncated final line from an interrupted write is ignored.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let lines: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            let last = lines.len().saturating_sub(1);
            let mut truncated = false;
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(entry) => {
                        entries.insert(entry.key.clone(), entry);
                    }
                    Err(_) if i == last => truncated = true,
                    Err(e) => {
                        return Err(Error::Parse {
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            if truncated {
                log::warn!("dropping truncated final cache line in {}", path.display());
                let mut kept = lines[..last].join("\n");
                if !kept.is_empty() {
                    kept.push('\n');
                }
                std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ReplayCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        self.entries.write().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }
}
