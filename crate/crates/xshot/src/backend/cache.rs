//! Persistent response cache keyed by a canonical request digest.
//!
//! Keys are the lowercase hex SHA-256 of a canonical JSON encoding
//! (sorted keys, no insignificant whitespace, UTF-8) of
//! `{backend_id, endpoint, request}`. Unreadable entries are treated
//! as misses and overwritten.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{BackendError, GenerationParams, LanguageModel, LmDescriptor, ScoredTokens, TokenId};

/// Overrides the cache directory when set.
pub const CACHE_DIR_ENV: &str = "XSHOT_CACHE_DIR";

/// Cache directory resolution: env var beats the configured path.
pub fn resolve_cache_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}

/// Content-addressed JSON store shared by the backend cache and the
/// translation client.
pub struct DiskCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Digest of the canonical JSON encoding of the request envelope.
    pub fn key(backend_id: &str, endpoint: &str, request: &serde_json::Value) -> String {
        // serde_json maps sort keys, so to_string is already canonical.
        let envelope = serde_json::json!({
            "backend_id": backend_id,
            "endpoint": endpoint,
            "request": request,
        });
        hex::encode(Sha256::digest(envelope.to_string().as_bytes()))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let path = self.dir.join(format!("{key}.json"));
        let bytes = std::fs::read(&path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().expect("cache write lock poisoned");
        let path = self.dir.join(format!("{key}.json"));
        let tmp = self.dir.join(format!("{key}.json.tmp"));
        let bytes = serde_json::to_vec(value).map_err(|e| BackendError::Remote(e.to_string()))?;
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Lookup, computing and storing on miss or on corrupted entries.
    pub fn get_or_compute<T, F>(&self, key: &str, compute: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        if let Some(hit) = self.get::<T>(key) {
            return Ok(hit);
        }
        let value = compute()?;
        self.put(key, &value)?;
        Ok(value)
    }
}

/// Memoizing wrapper around any backend. Hits are served from disk
/// without contacting the inner backend; `inner_calls` counts how many
/// requests actually reached it.
pub struct CachedBackend<B> {
    inner: B,
    cache: DiskCache,
    backend_id: String,
    inner_calls: AtomicU64,
}

impl<B: LanguageModel> CachedBackend<B> {
    pub fn wrap(inner: B, cache_dir: &Path) -> Result<Self, BackendError> {
        let backend_id = inner.descriptor().id;
        Ok(Self { inner, cache: DiskCache::open(cache_dir)?, backend_id, inner_calls: AtomicU64::new(0) })
    }

    /// Number of requests that reached the wrapped backend.
    pub fn inner_calls(&self) -> u64 {
        self.inner_calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> B {
        self.inner
    }

    fn compute<T, F>(&self, endpoint: &str, request: serde_json::Value, f: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&B) -> Result<T, BackendError>,
    {
        let key = DiskCache::key(&self.backend_id, endpoint, &request);
        self.cache.get_or_compute(&key, || {
            self.inner_calls.fetch_add(1, Ordering::SeqCst);
            f(&self.inner)
        })
    }
}

impl<B: LanguageModel> LanguageModel for CachedBackend<B> {
    fn descriptor(&self) -> LmDescriptor {
        self.inner.descriptor()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.compute("tokenize", serde_json::json!({ "text": text }), |b| b.tokenize(text))
    }

    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        self.compute("score", serde_json::json!({ "text": text }), |b| b.score(text))
    }

    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        self.compute(
            "conditional_score",
            serde_json::json!({ "context": context, "continuation": continuation }),
            |b| b.conditional_score(context, continuation),
        )
    }

    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        self.compute(
            "generate",
            serde_json::json!({
                "context": context,
                "max_new_tokens": params.max_new_tokens,
                "stop": params.stop_sequences,
            }),
            |b| b.greedy_generate(context, params),
        )
    }
}
