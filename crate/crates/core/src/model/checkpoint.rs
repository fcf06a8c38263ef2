//! Checkpoints: a JSON manifest plus a little-endian `f64` payload file.
//!
//! ```json
//! { "version": "mclswt-ckpt-v1", "dtype": "f64", "payload": "model.bin",
//!   "config": { ... },
//!   "tensors": [ { "name": "...", "kind": "parameter", "shape": [40, 1, 25, 1],
//!                  "offset": 0, "nbytes": 8000 }, ... ] }
//! ```
//! Offsets are byte offsets into the payload; `payload` is resolved relative
//! to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::SwtConfig;
use super::params::ModelParams;

pub const CHECKPOINT_VERSION: &str = "mclswt-ckpt-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Parameter,
    Buffer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub dtype: String,
    pub payload: String,
    pub config: SwtConfig,
    pub tensors: Vec<TensorEntry>,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (payload, extension replaced).
pub fn save(path: &Path, cfg: &SwtConfig, params: &ModelParams) -> Result<()> {
    let payload = payload_path(path);
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::new();
    let all = params
        .iter()
        .map(|(n, t)| (n, t, TensorKind::Parameter))
        .chain(params.buffers().map(|(n, t)| (n, t, TensorKind::Buffer)));
    for (name, t, kind) in all {
        let offset = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset,
            nbytes: bytes.len() - offset,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        dtype: "f64".to_string(),
        payload: payload
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config: cfg.clone(),
        tensors: entries,
    };
    fs::write(&payload, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(SwtConfig, ModelParams)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}",
            manifest.version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.payload))?;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.nbytes != n * 8 || e.offset + e.nbytes > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} spans bytes {}..{} but the payload has {}",
                e.name,
                e.offset,
                e.offset + e.nbytes,
                bytes.len()
            )));
        }
        let data = bytes[e.offset..e.offset + e.nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.kind {
            TensorKind::Parameter => params.insert(e.name.clone(), t),
            TensorKind::Buffer => buffers.insert(e.name.clone(), t),
        };
    }
    let params = ModelParams::from_named(&manifest.config, params, buffers)?;
    Ok((manifest.config, params))
}
