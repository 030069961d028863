//! Checkpoint layout: the 8-byte magic `SCNBERT1`, a little-endian `u64`
//! header length, a UTF-8 JSON header `{version, config, params}` whose
//! `params` lists `(name, shape)` in buffer order, then every parameter as
//! little-endian `f32`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamEntry;
use super::{ModelConfig, ModelError, ModelParameters};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCNBERT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

pub fn save_checkpoint(params: &ModelParameters<f32>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let header =
        Header { version: FORMAT_VERSION, config: params.config().clone(), params: params.manifest().to_vec() };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for x in params.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParameters<f32>, ModelError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    if bytes.len() < 16 {
        return Err(ckpt_err(path, "file too short for header"));
    }
    if &bytes[..7] != b"SCNBERT" {
        return Err(ckpt_err(path, "bad magic"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, format!("unsupported format version {:?}", bytes[7] as char)));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| ckpt_err(path, format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported header version {}", header.version)));
    }
    let expected = ModelParameters::<f32>::zeros(&header.config).map_err(|e| ckpt_err(path, e.to_string()))?;
    if expected.manifest() != header.params.as_slice() {
        return Err(ckpt_err(path, "parameter manifest does not match the configured shapes"));
    }
    let data = &body[header_len..];
    let want = 4 * expected.len();
    if data.len() != want {
        return Err(ckpt_err(path, format!("expected {want} bytes of parameters, found {}", data.len())));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ModelParameters::from_flat(&header.config, values).map_err(|e| ckpt_err(path, e.to_string()))
}

/// Loads a checkpoint and requires its configuration to equal `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelParameters<f32>, ModelError> {
    let path = path.as_ref();
    let params = load_checkpoint(path)?;
    if params.config() != expected {
        return Err(ckpt_err(
            path,
            format!("config mismatch: checkpoint has {:?}, expected {:?}", params.config(), expected),
        ));
    }
    Ok(params)
}
