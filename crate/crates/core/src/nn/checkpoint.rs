//! Binary checkpoints.
//!
//! Layout: magic `BLNK`, `u16` version, then per tensor until EOF: `u32` name
//! length, UTF-8 name, `u32` rank, `rank` x `u32` dims, `f32` payload. All
//! integers and floats are little-endian. Buffers are stored alongside
//! trainable parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BLNK";
pub const VERSION: u16 = 1;

pub fn write_to(mut w: impl Write, params: &ParameterSet) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params.all() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save(path: &Path, params: &ParameterSet) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, params).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses every tensor in a checkpoint, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > r.len() {
            return Err(Error::Checkpoint("truncated name".into()));
        }
        let (name, rest) = r.split_at(name_len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        r = rest;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if n * 4 > r.len() {
            return Err(Error::Checkpoint(format!("truncated payload for `{name}`")));
        }
        let (payload, rest) = r.split_at(n * 4);
        r = rest;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Loads a checkpoint into `params`, matching tensors by name and shape.
/// Every tensor in `params` must be present.
pub fn load_into(bytes: &[u8], params: &mut ParameterSet) -> Result<()> {
    let tensors = decode(bytes)?;
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        params.assign(&name, t)?;
        seen.insert(name);
    }
    if let Some((missing, _)) = params.all().find(|(k, _)| !seen.contains(*k)) {
        return Err(Error::Checkpoint(format!("checkpoint lacks `{missing}`")));
    }
    Ok(())
}

pub fn load(path: &Path, params: &mut ParameterSet) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(&bytes, params)
}
