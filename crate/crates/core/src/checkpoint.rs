//! Per-component checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SKEL" | version | entry count
//! per entry: name length | UTF-8 name | rank | dims...
//! payload: every entry's values as little-endian f32, in manifest order
//! ```
//!
//! Values are narrowed to `f32` on save, so save → load → save is
//! byte-identical.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SKEL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint manifest: {0}")]
    BadManifest(String),
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::BadManifest("truncated file".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(v).map_err(|_| CheckpointError::BadManifest(format!("{what} too large")))
}

pub fn write_params(w: &mut impl Write, params: &ParamSet) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, to_u32(params.len(), "entry count")?)?;
    for (name, t) in params.iter() {
        put_u32(w, to_u32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, to_u32(t.shape().len(), "rank")?)?;
        for &d in t.shape() {
            put_u32(w, to_u32(d, "dimension")?)?;
        }
    }
    for t in params.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ParamSet, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = get_u32(r)? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        if len > 4096 {
            return Err(CheckpointError::BadManifest(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::BadManifest("name is not UTF-8".into()))?;
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::BadManifest(format!(
                "rank {rank} for `{name}`"
            )));
        }
        let shape = (0..rank)
            .map(|_| get_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        manifest.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(truncated)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::BadManifest(format!("`{name}`: {e}")))?;
        if params.find(&name).is_some() {
            return Err(CheckpointError::BadManifest(format!(
                "duplicate entry `{name}`"
            )));
        }
        params.push(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::BadManifest("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path)?;
    read_params(&mut bytes.as_slice())
}
