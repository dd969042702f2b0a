//! Checkpoint persistence: parameter tensors in a little-endian binary file
//! with a JSON sidecar binding them to the exact configuration, epoch, and
//! corpus that produced them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tapegrad::ParamStore;

use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"SLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Sidecar metadata stored next to the binary tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing stage: "pretrain" or a task name.
    pub kind: String,
    pub config: Value,
    pub config_hash: String,
    pub epoch: usize,
    pub corpus_fingerprint: Option<String>,
    pub params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub params: Vec<(String, Array2<f64>)>,
    pub meta: CheckpointMeta,
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn meta_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Writes `<stem>.bin` and `<stem>.json` from the store's current values.
pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    kind: &str,
    config: Value,
    config_hash: String,
    epoch: usize,
    corpus_fingerprint: Option<String>,
) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let bp = bin_path(stem);
    let io = |e: std::io::Error| Error::io(bp.display().to_string(), e);
    let mut w = BufWriter::new(File::create(&bp).map_err(io)?);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    let entries: Vec<(String, &Array2<f64>)> =
        store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(io)?;
    let mut manifest = Vec::with_capacity(entries.len());
    for (name, value) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        let (r, c) = value.dim();
        w.write_all(&(r as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(c as u32).to_le_bytes()).map_err(io)?;
        for v in value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        manifest.push(ParamEntry { name: name.clone(), rows: r, cols: c });
    }
    w.flush().map_err(io)?;
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        config,
        config_hash,
        epoch,
        corpus_fingerprint,
        params: manifest,
    };
    let mp = meta_path(stem);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&mp, text).map_err(|e| Error::io(mp.display().to_string(), e))?;
    Ok(())
}

/// Reads both files back and cross-checks the sidecar manifest against the
/// binary contents.
pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let mp = meta_path(stem);
    let text =
        std::fs::read_to_string(&mp).map_err(|e| Error::io(mp.display().to_string(), e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;

    let bp = bin_path(stem);
    let io = |e: std::io::Error| Error::io(bp.display().to_string(), e);
    let mut r = BufReader::new(File::open(&bp).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4).map_err(io)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(io)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("parameter name not utf-8: {e}")))?;
        r.read_exact(&mut b4).map_err(io)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(io)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut data = vec![0f64; rows * cols];
        let mut b8 = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b8).map_err(io)?;
            *v = f64::from_le_bytes(b8);
        }
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))?;
        params.push((name, value));
    }
    let mut tail = Vec::new();
    r.read_to_end(&mut tail).map_err(io)?;
    if !tail.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", tail.len())));
    }
    let manifest: Vec<ParamEntry> = params
        .iter()
        .map(|(n, v)| ParamEntry { name: n.clone(), rows: v.dim().0, cols: v.dim().1 })
        .collect();
    if manifest != meta.params {
        return Err(Error::Checkpoint("sidecar manifest disagrees with tensors".into()));
    }
    Ok(Checkpoint { params, meta })
}

impl Checkpoint {
    /// Copies every stored tensor whose name starts with one of `prefixes`
    /// into the matching parameter of `store` (shape-checked). Returns how
    /// many were applied; a selected tensor with no destination is an error.
    pub fn apply(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut applied = 0;
        for (name, value) in &self.params {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let id = store.by_name(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter '{name}' missing from model"))
            })?;
            let dst = store.value_mut(id);
            if dst.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?} in file, {:?} in model",
                    value.dim(),
                    dst.dim()
                )));
            }
            dst.assign(value);
            applied += 1;
        }
        Ok(applied)
    }

    /// Copies every stored tensor into the store, requiring an exact
    /// name-for-name match in both directions.
    pub fn apply_all(&self, store: &mut ParamStore) -> Result<()> {
        let expected = store.iter().count();
        if expected != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {expected}",
                self.params.len()
            )));
        }
        let n = self.apply(store, &[""])?;
        debug_assert_eq!(n, expected);
        Ok(())
    }
}

/// Digest of the corpus manifest, recorded in checkpoints for provenance.
pub fn corpus_fingerprint(root: &Path) -> Result<String> {
    let path = root.join("manifest.jsonl");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
