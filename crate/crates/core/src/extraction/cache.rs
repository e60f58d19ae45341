//! Content-addressed feature store: `<root>/ab/cd/<key>.adt` holds the tensor
//! record followed by a CRC32 of it, `<key>.json` the provenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{ExtractionConfig, ExtractionError, FeatureSequence, Provenance};
use crate::datagen::VideoClip;
use crate::numerics::io::{from_bytes, to_bytes, Dtype};

/// Environment variable that overrides the cache root.
pub const CACHE_ENV: &str = "ACTIONDIFF_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 16]);

impl CacheKey {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.hex())
    }
}

/// SHA-256 over the clip's shape and frame bits, hex. Two clips with the
/// same id but different pixels get different cache entries.
pub fn clip_digest(clip: &VideoClip) -> String {
    let mut h = Sha256::new();
    for &d in clip.frames.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in clip.frames.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the canonical JSON of `(config, fingerprint, clip id, clip
/// digest)`, truncated to 128 bits.
pub fn cache_key(config: &ExtractionConfig, fingerprint: u64, clip_id: &str, digest: &str) -> CacheKey {
    let canonical = serde_json::to_vec(&(config, format!("{fingerprint:016x}"), clip_id, digest)).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    let mut k = [0u8; 16];
    k.copy_from_slice(&digest[..16]);
    CacheKey(k)
}

#[derive(Debug)]
pub struct FeatureCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> FeatureCache {
        FeatureCache { root: root.into(), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    /// Root from `ACTIONDIFF_CACHE` if set, else `default`.
    pub fn from_env(default: impl Into<PathBuf>) -> FeatureCache {
        match std::env::var_os(CACHE_ENV) {
            Some(p) if !p.is_empty() => Self::new(PathBuf::from(p)),
            _ => Self::new(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let h = key.hex();
        self.root.join(&h[0..2]).join(&h[2..4]).join(format!("{h}.adt"))
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExtractionError> {
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{}.{n}", std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn put(&self, key: &CacheKey, seq: &FeatureSequence) -> Result<(), ExtractionError> {
        let path = self.path_for(key);
        fs::create_dir_all(path.parent().unwrap())?;
        let mut bytes = to_bytes(&seq.features, Dtype::F64);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        Self::write_atomic(&path.with_extension("json"), &serde_json::to_vec_pretty(&seq.provenance)?)?;
        Self::write_atomic(&path, &bytes)
    }

    /// `Ok(None)` on a miss; a checksum or format failure is an error.
    pub fn get(&self, key: &CacheKey) -> Result<Option<FeatureSequence>, ExtractionError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let corrupted = |why: &str| ExtractionError::Corrupted { path: path.clone(), reason: why.to_string() };
        if bytes.len() < 4 {
            return Err(corrupted("truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != trailer {
            return Err(corrupted("checksum mismatch"));
        }
        let features = from_bytes(body).map_err(|e| corrupted(&e.to_string()))?;
        let provenance: Provenance = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        self.hits.fetch_add(1, Ordering::Relaxed);
        Ok(Some(FeatureSequence { features, provenance }))
    }
}
