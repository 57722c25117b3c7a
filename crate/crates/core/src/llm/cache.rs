use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatMessage, ChatRequest, Usage};

/// SHA-256 over the backend id, model, rendered messages and temperature.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend: &'a str,
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

impl CacheKey {
    pub fn new(backend_id: &str, request: &ChatRequest) -> Self {
        let material = KeyMaterial {
            backend: backend_id,
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        CacheKey(hex::encode(Sha256::digest(bytes)))
    }

    pub fn digest(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub response: String,
    pub usage: Usage,
}

/// One JSON file per key under a directory. Writes go to a temp file in the
/// same directory and are renamed into place.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> io::Result<Option<CachedResponse>> {
        match fs::read(self.path(key)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &CacheKey, value: &CachedResponse) -> io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, value)?;
        tmp.write_all(b"\n")?;
        tmp.persist(self.path(key)).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn len(&self) -> io::Result<usize> {
        Ok(self.entries()?.len())
    }

    pub fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Removes every cached response; returns how many were removed.
    pub fn clear(&self) -> io::Result<usize> {
        let entries = self.entries()?;
        for p in &entries {
            fs::remove_file(p)?;
        }
        Ok(entries.len())
    }

    fn entries(&self) -> io::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }
}
