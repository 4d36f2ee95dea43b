//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as raw little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GIDNCKPT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    run_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Echo of the run configuration that produced the weights.
    pub run_config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        self.params.visit(&mut |p| {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: data.len(),
                len: p.value.len(),
            });
            for x in p.value.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        });
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            model: self.config.clone(),
            run_config: self.run_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.model.validate()?;
        let data = &bytes[data_start..];
        let mut params = ModelParams::init(&manifest.model, 0)?;
        let mut expected = Vec::new();
        params.visit(&mut |p| expected.push((p.name.clone(), p.value.shape().to_vec())));
        if expected.len() != manifest.tensors.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, the configured model has {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name {
                return Err(bad(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            if &entry.shape != shape || entry.len != shape.iter().product::<usize>() {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?}, the configured model needs {shape:?}",
                    entry.shape
                )));
            }
            let end = entry.offset + entry.len * 8;
            if end > data.len() {
                return Err(bad(format!("tensor `{name}` runs past the end of the file")));
            }
        }
        let mut k = 0;
        params.visit_mut(&mut |p| {
            let e = &manifest.tensors[k];
            let raw = &data[e.offset..e.offset + e.len * 8];
            for (x, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            k += 1;
        });
        if !params.all_finite() {
            return Err(bad("checkpoint contains non-finite weights".into()));
        }
        Ok(Checkpoint {
            config: manifest.model,
            params,
            run_config: manifest.run_config,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
