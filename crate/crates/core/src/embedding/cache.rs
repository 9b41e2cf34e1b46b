//! Content-addressed vector store.
//!
//! Layout under the cache root:
//!
//! ```text
//! embeddings/<model>/manifest.json
//! embeddings/<model>/<channel>/<h[0..2]>/<h>.bin   little-endian f64 values
//! ```
//!
//! where `h = sha256(channel || 0x00 || text)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingChannel, EmbeddingError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub model_id: String,
    pub dim: Option<usize>,
    pub channels: Vec<EmbeddingChannel>,
}

pub struct VectorCache {
    root: PathBuf,
    manifest: Mutex<CacheManifest>,
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> EmbeddingError {
    EmbeddingError::Cache(format!("{}: {e}", path.display()))
}

fn model_slug(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn content_key(channel: EmbeddingChannel, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(channel.as_str().as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EmbeddingError> {
    let dir = path.parent().expect("cache path has a parent");
    fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| cache_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| cache_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| cache_err(path, e))
}

impl VectorCache {
    pub fn open(cache_dir: &Path, model_id: &str) -> Result<Self, EmbeddingError> {
        let root = cache_dir.join("embeddings").join(model_slug(model_id));
        fs::create_dir_all(&root).map_err(|e| cache_err(&root, e))?;
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let raw = fs::read_to_string(&manifest_path).map_err(|e| cache_err(&manifest_path, e))?;
            let m: CacheManifest = serde_json::from_str(&raw).map_err(|e| cache_err(&manifest_path, e))?;
            if m.model_id != model_id {
                return Err(EmbeddingError::Cache(format!(
                    "cache at {} belongs to model `{}`",
                    root.display(),
                    m.model_id
                )));
            }
            m
        } else {
            CacheManifest {
                model_id: model_id.to_string(),
                dim: None,
                channels: Vec::new(),
            }
        };
        Ok(Self {
            root,
            manifest: Mutex::new(manifest),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> CacheManifest {
        self.manifest.lock().expect("cache poisoned").clone()
    }

    fn vector_path(&self, channel: EmbeddingChannel, key: &str) -> PathBuf {
        self.root
            .join(channel.as_str())
            .join(&key[..2])
            .join(format!("{key}.bin"))
    }

    pub fn get(&self, channel: EmbeddingChannel, text: &str) -> Result<Option<Vec<f64>>, EmbeddingError> {
        let path = self.vector_path(channel, &content_key(channel, text));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        if bytes.is_empty() || bytes.len() % 8 != 0 {
            return Err(cache_err(&path, "truncated vector file"));
        }
        Ok(Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }

    /// Stores a vector, recording its dimension and channel in the manifest.
    pub fn put(&self, channel: EmbeddingChannel, text: &str, values: &[f64]) -> Result<(), EmbeddingError> {
        let mut manifest = self.manifest.lock().expect("cache poisoned");
        match manifest.dim {
            Some(d) if d != values.len() => {
                return Err(EmbeddingError::DimConflict {
                    expected: d,
                    got: values.len(),
                })
            }
            _ => {}
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&self.vector_path(channel, &content_key(channel, text)), &bytes)?;
        let mut dirty = false;
        if manifest.dim.is_none() {
            manifest.dim = Some(values.len());
            dirty = true;
        }
        if !manifest.channels.contains(&channel) {
            manifest.channels.push(channel);
            manifest.channels.sort();
            dirty = true;
        }
        if dirty {
            let body = serde_json::to_vec_pretty(&*manifest).expect("manifest json");
            write_atomic(&self.root.join("manifest.json"), &body)?;
        }
        Ok(())
    }
}
