//! Single-file checkpoints: `"PXDC"`, version, config JSON and named
//! tensors stored as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::tape::{c, Scalar};
use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"PXDC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(mut r: &[u8]) -> Result<Model<T>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = get_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = get_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(c::<T>(f64::from(f32::from_le_bytes(b))));
        }
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        named.push((name, t));
    }
    if !r.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Model::from_tensors(cfg, named)?)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of a model's checkpoint encoding.
pub fn fingerprint<T: Scalar>(model: &Model<T>) -> String {
    let digest = Sha256::digest(to_bytes(model));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
