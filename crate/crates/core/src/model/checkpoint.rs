//! Binary parameter checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` format version, `u64` header
//! length, JSON header `{"config", "manifest"}`, `u64` tensor count, then per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::data::DatasetManifest;
use crate::error::{Result, UumError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UUMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: DatasetManifest,
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let header = serde_json::to_vec(&Header { config: model.config.clone(), manifest: model.manifest.clone() })
        .expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + 8 * model.store.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes via a temporary sibling file, then renames into place.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model)).map_err(|e| UumError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| UumError::io(path, e))
}

/// Hex SHA-256 of the checkpoint bytes.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| UumError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| UumError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| UumError::Checkpoint(format!("implausible length {v} at byte {}", self.pos - 8)))
    }
}

struct Decoded {
    header: Header,
    tensors: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| UumError::CheckpointVersion {
        expected: format!("UUMCKPT v{CHECKPOINT_VERSION}"),
        found: "file shorter than the header".into(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(UumError::CheckpointVersion {
            expected: format!("UUMCKPT v{CHECKPOINT_VERSION}"),
            found: format!("magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(UumError::CheckpointVersion {
            expected: format!("UUMCKPT v{CHECKPOINT_VERSION}"),
            found: format!("UUMCKPT v{version}"),
        });
    }
    let hlen = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| UumError::Checkpoint(format!("bad header: {e}")))?;
    let count = r.len()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| UumError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| UumError::Checkpoint(format!("tensor `{name}` too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| UumError::Checkpoint(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(UumError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded { header, tensors })
}

fn fill(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != model.store.len() {
        return Err(UumError::Checkpoint(format!(
            "{} tensors in file, model has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| UumError::Checkpoint(format!("unexpected tensor `{name}`")))?;
        model.store.set(id, t)?;
    }
    if !model.store.all_finite() {
        return Err(UumError::Checkpoint("non-finite parameter values".into()));
    }
    Ok(())
}

/// Rebuilds the model recorded in the checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| UumError::io(path, e))?;
    let Decoded { header, tensors } = decode(&bytes)?;
    let mut model = Model::new(header.config, header.manifest)?;
    fill(&mut model, tensors)?;
    Ok(model)
}

/// Loads parameters into a model built from `config` and `manifest`.
/// Tensor names and shapes are checked first, so a wrong latent width is
/// reported against the first tensor it affects; any remaining config
/// difference is a config error.
pub fn load_checkpoint_as(path: &Path, config: &ModelConfig, manifest: &DatasetManifest) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| UumError::io(path, e))?;
    let Decoded { header, tensors } = decode(&bytes)?;
    let mut model = Model::new(config.clone(), manifest.clone())?;
    fill(&mut model, tensors)?;
    if header.manifest != *manifest {
        return Err(UumError::Config("checkpoint was trained on a different dataset manifest".into()));
    }
    let mut found = header.config;
    // initialization seed does not affect a loaded model
    found.init_seed = config.init_seed;
    if found != *config {
        return Err(UumError::Config(format!(
            "checkpoint model config differs from the requested one: {}",
            config_diff(&found, config)
        )));
    }
    Ok(model)
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (a, b) = (serde_json::to_value(a).expect("config"), serde_json::to_value(b).expect("config"));
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else { return String::new() };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", b[k]))
        .collect::<Vec<_>>()
        .join("; ")
}
