use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vae::LatentField;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything that determines an encoded latent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    /// Content digest of the curated asset.
    pub asset: String,
    pub resolution: u32,
    pub density: usize,
    pub monochrome: bool,
    /// Content digest of the VAE checkpoint.
    pub vae: String,
    pub seed: u64,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        let text = format!(
            "asset={};resolution={};density={};monochrome={};vae={};seed={}",
            self.asset, self.resolution, self.density, self.monochrome, self.vae, self.seed
        );
        sha256_hex(text.as_bytes())
    }
}

/// Content-addressed store of serialized latent fields under a root directory.
pub struct LatentCache {
    root: PathBuf,
}

impl LatentCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let d = key.digest();
        self.root.join("latents").join(&d[..2]).join(format!("{d}.latf"))
    }

    /// Stored latent for `key`, or `None` on a miss. Corrupt entries are errors.
    pub fn get(&self, key: &CacheKey) -> Result<Option<LatentField>> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        LatentField::load(&path).map(Some)
    }

    /// Stores `latent` and returns the digest of its serialized bytes.
    pub fn put(&self, key: &CacheKey, latent: &LatentField) -> Result<String> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = latent.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Cached latent for `key`, computing and storing it on a miss; the flag reports a hit.
    pub fn get_or_insert_with(
        &self,
        key: &CacheKey,
        encode: impl FnOnce() -> Result<LatentField>,
    ) -> Result<(LatentField, bool)> {
        if let Some(latent) = self.get(key)? {
            return Ok((latent, true));
        }
        let latent = encode()?;
        self.put(key, &latent)?;
        Ok((latent, false))
    }
}
