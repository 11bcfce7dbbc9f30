//! Append-only response cache keyed by request fingerprint.
//!
//! Each entry lives in `<dir>/<fingerprint>.json`. Existing entries are
//! never rewritten. Writes go through a single lock; reads do not.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::client::{ChatClient, ChatRequest, Endpoint, TransportError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub client_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub endpoint: Endpoint,
    pub request_fingerprint: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// In-memory index over an optional on-disk directory.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, String>>,
    writer: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: RwLock::new(HashMap::new()),
            writer: Mutex::new(()),
        }
    }

    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            mem: RwLock::new(HashMap::new()),
            writer: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, fingerprint: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{fingerprint}.json")))
    }

    pub fn get(&self, fingerprint: &str) -> Option<String> {
        if let Some(hit) = self.mem.read().expect("cache lock").get(fingerprint) {
            return Some(hit.clone());
        }
        let path = self.entry_path(fingerprint)?;
        let raw = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry) if entry.request_fingerprint == fingerprint => {
                self.mem
                    .write()
                    .expect("cache lock")
                    .insert(fingerprint.to_owned(), entry.response.clone());
                Some(entry.response)
            }
            _ => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, entry: CacheEntry) -> io::Result<()> {
        let _guard = self.writer.lock().expect("cache writer lock");
        if let Some(path) = self.entry_path(&entry.request_fingerprint) {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let body = serde_json::to_vec_pretty(&entry).map_err(io::Error::other)?;
                    f.write_all(&body)?;
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {}
                Err(e) => return Err(e),
            }
        }
        self.mem
            .write()
            .expect("cache lock")
            .entry(entry.request_fingerprint)
            .or_insert(entry.response);
        Ok(())
    }
}

/// Serves replies from a [`ResponseCache`], forwarding misses to `inner`.
pub struct Cached<C> {
    inner: C,
    store: ResponseCache,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<C: ChatClient> Cached<C> {
    pub fn new(inner: C, store: ResponseCache) -> Self {
        Self {
            inner,
            store,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    pub fn store(&self) -> &ResponseCache {
        &self.store
    }
}

impl<C: ChatClient> ChatClient for Cached<C> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let client_id = self.inner.id();
        let fingerprint = request.fingerprint(&client_id);
        if let Some(reply) = self.store.get(&fingerprint) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(reply);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let reply = self.inner.send(request)?;
        let entry = CacheEntry {
            client_id,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            endpoint: request.endpoint(),
            request_fingerprint: fingerprint,
            response: reply.clone(),
        };
        if let Err(e) = self.store.put(entry) {
            log::warn!("cache write failed: {e}");
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::client::{FnClient, Metered};

    fn counter_client(
    ) -> Metered<FnClient<impl Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync>>
    {
        Metered::new(FnClient::new("echo", |r: &ChatRequest| {
            Ok(format!("reply to {}", r.prompt()))
        }))
    }

    #[test]
    fn replay_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let first = Cached::new(counter_client(), ResponseCache::open(dir.path()).unwrap());
        let a = first.complete("c", "p1").unwrap();
        let b = first.complete("c", "p1").unwrap();
        assert_eq!(a, b);
        assert_eq!(first.inner().counts().complete, 1);
        assert_eq!(first.stats(), CacheStats { hits: 1, misses: 1 });

        let second = Cached::new(counter_client(), ResponseCache::open(dir.path()).unwrap());
        assert_eq!(second.complete("c", "p1").unwrap(), a);
        assert_eq!(second.inner().counts().total(), 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn entries_are_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResponseCache::open(dir.path()).unwrap();
        let entry = |response: &str| CacheEntry {
            client_id: "c".into(),
            created_at: 0,
            endpoint: Endpoint::Complete,
            request_fingerprint: "ab".into(),
            response: response.into(),
        };
        store.put(entry("first")).unwrap();
        store.put(entry("second")).unwrap();
        let fresh = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(fresh.get("ab").as_deref(), Some("first"));
    }
}
