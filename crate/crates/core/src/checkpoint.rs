//! Checkpoint directories: `checkpoint.toml` (format, kind, step, config
//! snapshot, per-tensor SHA-256) plus one tensor blob per key.
//!
//! Saving writes a sibling temporary directory and renames it into place.
//! Loading verifies every hash before decoding any blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor, TENSOR_EXT};
use crate::nn::ParamStore;

pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const CHECKPOINT_FORMAT: &str = "fsdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const BLOB_DIR: &str = "tensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Clarity model only.
    Clse,
    /// Fusion network, its optimiser moments and the clarity model it was
    /// trained with.
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    key: String,
    file: String,
    sha256: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    format_version: u32,
    kind: CheckpointKind,
    step: u64,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: RunConfig,
    pub tensors: ParamStore<f32>,
}

fn blob_name(i: usize, key: &str) -> String {
    let safe: String = key.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect();
    format!("{i:05}_{safe}.{TENSOR_EXT}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let blobs = tmp.join(BLOB_DIR);
        fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
        let result = self.write_into(&tmp);
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        let old = sibling(dir, "old");
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    fn write_into(&self, tmp: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (i, (key, t)) in self.tensors.iter().enumerate() {
            let file = format!("{BLOB_DIR}/{}", blob_name(i, key));
            let bytes = encode_tensor(t);
            let path = tmp.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry {
                key: key.clone(),
                file,
                sha256: sha256_hex(&bytes),
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            step: self.step,
            config: self.config.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(tmp.join(CHECKPOINT_FILE), e.to_string()))?;
        let path = tmp.join(CHECKPOINT_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT || m.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported checkpoint {} v{}", m.format, m.format_version)));
        }
        m.config.validate()?;
        let mut raw = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            if e.file.contains("..") || Path::new(&e.file).is_absolute() {
                return Err(Error::format(&mpath, format!("blob path {} escapes the checkpoint", e.file)));
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::format(&path, format!("hash mismatch for {}", e.key)));
            }
            raw.push((e, path, bytes));
        }
        let mut tensors = ParamStore::new();
        for (e, path, bytes) in raw {
            let t = decode_tensor(&bytes, &path)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::format(&path, format!("{} has shape {:?}, manifest says {:?}", e.key, t.shape(), e.shape)));
            }
            tensors.insert(e.key.clone(), t);
        }
        Ok(Self {
            kind: m.kind,
            step: m.step,
            config: m.config,
            tensors,
        })
    }

    pub fn expect_kind(self, kind: CheckpointKind, dir: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format(dir, format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(self)
    }
}
