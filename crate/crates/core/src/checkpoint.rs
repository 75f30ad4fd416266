//! Single-file weight archives.
//!
//! Layout: the 8-byte magic `LMCKPT01`, a little-endian `u64` manifest length,
//! the manifest as UTF-8 JSON, then every tensor's `f32` values little-endian
//! in manifest order. The manifest records the archive kind, free-form
//! metadata, tensor names/shapes and a checksum of the weights.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{checksum, Param, Tensor};

const MAGIC: &[u8; 8] = b"LMCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub checksum: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, kind: &str, meta: serde_json::Value, params: &[Param<f32>]) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        checksum: checksum(params),
        meta,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name().to_string(),
                shape: p.shape(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for p in params {
        for v in p.value().data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(manifest)
}

fn read_header(r: &mut impl Read) -> Result<Manifest> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(Error::Checkpoint("manifest too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let m: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_header(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Loads weights into `params` (matched by name and shape) and verifies the
/// stored checksum. Returns the manifest.
pub fn load_into(path: &Path, kind: &str, params: &[Param<f32>]) -> Result<Manifest> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let m = read_header(&mut r)?;
    if m.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            m.kind
        )));
    }
    if m.tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            m.tensors.len(),
            params.len()
        )));
    }
    let mut loaded = Vec::with_capacity(params.len());
    for (entry, p) in m.tensors.iter().zip(params) {
        if entry.name != p.name() || entry.shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        loaded.push(Tensor::from_vec(&entry.shape, data));
    }
    for (p, t) in params.iter().zip(loaded) {
        p.set(t);
    }
    if checksum(params) != m.checksum {
        return Err(Error::Checkpoint("weight checksum mismatch".into()));
    }
    Ok(m)
}
