//! Binary container: magic, little-endian u64 manifest length, JSON
//! manifest, then little-endian f64 blobs. The manifest carries a SHA-256
//! of the blob region so corrupted weights are rejected on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S2D4DCK1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Entry {
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    /// Tensor order as written; the map below is keyed by name.
    order: Vec<String>,
    tensors: BTreeMap<String, Entry>,
    blob_sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// In-memory checkpoint: a kind tag, free-form JSON metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut order = Vec::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if tensors
                .insert(
                    name.clone(),
                    Entry {
                        shape: t.shape(),
                        dtype: "f64".into(),
                        offset,
                    },
                )
                .is_some()
            {
                return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
            }
            order.push(name.clone());
            offset += t.len() * 8;
        }
        let mut blobs = Vec::with_capacity(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            order,
            tensors,
            blob_sha256: digest(&blobs),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let blobs = &bytes[body..];
        let expected: usize = manifest.tensors.values().map(|e| e.shape[0] * e.shape[1] * 8).sum();
        if blobs.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor data is {} bytes, manifest describes {expected}",
                blobs.len()
            )));
        }
        if digest(blobs) != manifest.blob_sha256 {
            return Err(Error::Checkpoint("tensor data fails its checksum".into()));
        }
        let mut tensors = Vec::with_capacity(manifest.order.len());
        for name in &manifest.order {
            let e = manifest
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lists `{name}` without an entry")))?;
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("unsupported dtype `{}`", e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let raw = blobs
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is truncated")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name.clone(), Tensor::new(e.shape[0], e.shape[1], data)?));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
