use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

/// Cached responses use the same shapes as the HTTP wire format, so a cache
/// directory doubles as a human-readable transcript of every backend call.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CachedResponse {
    Texts { texts: Vec<String> },
    PYes { p_yes: f64 },
}

/// Content address of a canonicalized request.
pub fn cache_key<T: Serialize>(request: &T) -> String {
    let bytes = serde_json::to_vec(request).expect("request serialization cannot fail");
    let digest = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write-once filesystem cache, laid out as `{root}/{first two hex}/{key}.json`.
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: PathBuf) -> Result<Self, GatewayError> {
        std::fs::create_dir_all(&root).map_err(|source| GatewayError::CacheIo {
            path: root.display().to_string(),
            source,
        })?;
        Ok(DiskCache { root })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CachedResponse>, GatewayError> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(GatewayError::CacheIo { path: path.display().to_string(), source })
            }
        };
        let resp = serde_json::from_slice(&bytes).map_err(|e| GatewayError::CacheIo {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        Ok(Some(resp))
    }

    /// Atomic publish: write a unique temp file, then rename into place.
    /// Concurrent writers of the same key race benignly (same content).
    pub fn put(&self, key: &str, resp: &CachedResponse) -> Result<(), GatewayError> {
        let path = self.path_for(key);
        let io_err = |source| GatewayError::CacheIo { path: path.display().to_string(), source };
        let dir = path.parent().expect("cache paths always have a parent");
        std::fs::create_dir_all(dir).map_err(io_err)?;
        let tmp = dir.join(format!(
            ".{key}.{}.tmp",
            std::process::id() as u64 ^ (resp as *const _ as u64)
        ));
        let bytes = serde_json::to_vec(resp).expect("response serialization cannot fail");
        std::fs::write(&tmp, bytes).map_err(io_err)?;
        std::fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }
}
