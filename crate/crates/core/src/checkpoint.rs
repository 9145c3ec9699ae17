//! Checkpoints: named little-endian f64 arrays concatenated in `<stem>.bin`,
//! described by a JSON sidecar `<stem>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::NetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            arrays: Vec::new(),
            meta,
        }
    }

    pub fn with(mut self, name: impl Into<String>, values: &[f64]) -> Self {
        self.arrays.push((name.into(), values.to_vec()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::format(path, format!("missing array `{name}`")))
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save(stem: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, values) in &ckpt.arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        format: "f64-le".into(),
        arrays: entries,
        meta: ckpt.meta.clone(),
    };
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

pub fn load(stem: &Path) -> Result<Checkpoint> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if sidecar.format != "f64-le" {
        return Err(Error::format(&json, format!("unsupported format `{}`", sidecar.format)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&bin, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut arrays = Vec::with_capacity(sidecar.arrays.len());
    for e in sidecar.arrays {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
        let Some(end) = end else {
            return Err(Error::format(&bin, format!("array `{}` runs past the end", e.name)));
        };
        arrays.push((e.name, values[e.offset..end].to_vec()));
    }
    Ok(Checkpoint {
        arrays,
        meta: sidecar.meta,
    })
}

/// Hex SHA-256 of the canonical JSON form of an architecture.
pub fn architecture_hash(cfg: &NetConfig) -> String {
    let text = serde_json::to_string(cfg).expect("NetConfig serializes");
    hex_digest(text.as_bytes())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
