//! Append-only JSONL response cache.
//!
//! Each line is `{"k":<sha256 hex>,"kind":"text"|"relevance","v":<value>,"ts":<unix secs>}`.
//! The key hashes backend id, model id and the canonical request. A
//! truncated final line (an interrupted append) is dropped on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Clock, GenerationBackend, GenerationRequest, Result, VlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "v", rename_all = "lowercase")]
pub enum CachedValue {
    Text(String),
    Relevance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub k: String,
    #[serde(flatten)]
    pub value: CachedValue,
    pub ts: u64,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file and loads its entries. Later lines
    /// win for repeated keys.
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| VlmError::Cache(format!("{}: {e}", path.display()));
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(io)?;
            let mut valid_len = 0usize;
            let mut offset = 0usize;
            let lines: Vec<&str> = raw.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                offset += line.len();
                let last = i + 1 == lines.len();
                let body = line.trim_end_matches('\n');
                if body.trim().is_empty() {
                    valid_len = offset;
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(body) {
                    Ok(e) => {
                        entries.insert(e.k.clone(), e);
                        valid_len = offset;
                    }
                    Err(_) if last => {
                        log::warn!("{}: ignoring truncated final cache line", path.display());
                    }
                    Err(err) => {
                        return Err(VlmError::Cache(format!("{}:{}: {err}", path.display(), i + 1)));
                    }
                }
            }
            if valid_len < raw.len() {
                let f = OpenOptions::new().write(true).open(path).map_err(io)?;
                f.set_len(valid_len as u64).map_err(io)?;
            }
            if valid_len > 0 && !raw[..valid_len].ends_with('\n') {
                let mut f = OpenOptions::new().append(true).open(path).map_err(io)?;
                f.write_all(b"\n").map_err(io)?;
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn key(backend_id: &str, model_id: &str, req: &GenerationRequest) -> String {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0]);
        h.update(model_id.as_bytes());
        h.update([0]);
        h.update(req.canonical().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: String, value: CachedValue, ts: u64) -> Result<()> {
        let entry = CacheEntry { k: key, value, ts };
        let mut w = self.writer.lock().unwrap();
        if let Some(w) = w.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| VlmError::Cache(e.to_string()))?;
            let io = |e: std::io::Error| VlmError::Cache(e.to_string());
            w.write_all(line.as_bytes()).map_err(io)?;
            w.write_all(b"\n").map_err(io)?;
            w.flush().map_err(io)?;
        }
        self.entries.write().unwrap().insert(entry.k.clone(), entry);
        Ok(())
    }
}

/// Serves repeated requests from a [`ResponseCache`]; misses go to the
/// wrapped backend and are recorded on success.
pub struct CachedBackend<B> {
    inner: B,
    cache: Arc<ResponseCache>,
    clock: Clock,
    misses: AtomicUsize,
    pending: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<B: GenerationBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>, clock: Clock) -> Self {
        Self {
            inner,
            cache,
            clock,
            misses: AtomicUsize::new(0),
            pending: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Calls forwarded to the wrapped backend.
    pub fn backend_calls(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn key(&self, req: &GenerationRequest) -> String {
        ResponseCache::key(self.inner.backend_id(), self.inner.model_id(), req)
    }

    /// Looks `key` up, computing and recording it on a miss. Concurrent
    /// misses on one key wait for the first instead of calling again.
    fn get_or_compute(
        &self,
        key: String,
        hit: impl Fn(CachedValue) -> Option<CachedValue>,
        compute: impl FnOnce() -> Result<CachedValue>,
    ) -> Result<CachedValue> {
        if let Some(v) = self.cache.get(&key).and_then(|e| hit(e.value)) {
            return Ok(v);
        }
        let slot = self.pending.lock().unwrap().entry(key.clone()).or_default().clone();
        let _guard = slot.lock().unwrap();
        if let Some(v) = self.cache.get(&key).and_then(|e| hit(e.value)) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let result = compute().and_then(|v| {
            self.cache.put(key.clone(), v.clone(), self.clock.now())?;
            Ok(v)
        });
        self.pending.lock().unwrap().remove(&key);
        result
    }
}

impl<B: GenerationBackend> GenerationBackend for CachedBackend<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        req.validate()?;
        let text = |v| match v {
            CachedValue::Text(t) => Some(CachedValue::Text(t)),
            CachedValue::Relevance(_) => None,
        };
        let v = self.get_or_compute(self.key(req), text, || {
            let t = self.inner.generate(req)?.trim().to_string();
            if t.is_empty() {
                return Err(VlmError::Backend {
                    status: None,
                    message: "backend returned empty text".into(),
                });
            }
            Ok(CachedValue::Text(t))
        })?;
        match v {
            CachedValue::Text(t) => Ok(t),
            CachedValue::Relevance(_) => unreachable!(),
        }
    }

    fn relevance(&self, req: &GenerationRequest) -> Result<f64> {
        req.validate()?;
        let prob = |v| match v {
            CachedValue::Relevance(p) => Some(CachedValue::Relevance(p)),
            CachedValue::Text(_) => None,
        };
        let v = self.get_or_compute(self.key(req), prob, || {
            let p = self.inner.relevance(req)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(VlmError::Backend {
                    status: None,
                    message: format!("relevance {p} outside [0, 1]"),
                });
            }
            Ok(CachedValue::Relevance(p))
        })?;
        match v {
            CachedValue::Relevance(p) => Ok(p),
            CachedValue::Text(_) => unreachable!(),
        }
    }
}
