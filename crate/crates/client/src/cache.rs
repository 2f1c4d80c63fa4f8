use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use medvl_core::templates::Message;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Decoding;
use crate::error::ClientError;

/// SHA-256 over the canonical JSON of everything that determines a response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model_id: &'a str,
    messages: &'a [Message],
    image_refs: &'a [String],
    decoding: &'a Decoding,
}

impl CacheKey {
    pub fn new(model_id: &str, messages: &[Message], image_refs: &[String], decoding: &Decoding) -> Self {
        // Struct fields serialize in declaration order, so the bytes are stable.
        let bytes = serde_json::to_vec(&KeyMaterial { model_id, messages, image_refs, decoding })
            .expect("key material serializes");
        CacheKey(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub raw_text: String,
    pub latency_ms: f64,
}

/// One file per key under `dir/<first two hex digits>/<hex>.json`.
///
/// Entries are never rewritten. Writes go through a temporary file and a
/// rename, serialized by a process-local lock, so readers only ever see
/// complete entries.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    writer: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ClientError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache { dir, writer: Mutex::new(()), tmp_counter: AtomicU64::new(0) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(&key.0[..2]).join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CachedResponse>, ClientError> {
        let path = self.path(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ClientError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ClientError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    /// Stores `value` unless the key already has an entry.
    pub fn put(&self, key: &CacheKey, value: &CachedResponse) -> Result<(), ClientError> {
        let path = self.path(key);
        let err = |e: std::io::Error| ClientError::Cache(format!("{}: {e}", path.display()));
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if path.exists() {
            return Ok(());
        }
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(err)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = parent.join(format!(".{}.{}.{n}.tmp", key.0, std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(&serde_json::to_vec(value).expect("cache entry serializes")).map_err(err)?;
        f.sync_all().map_err(err)?;
        drop(f);
        fs::rename(&tmp, &path).map_err(err)
    }
}
