//! `MGWT` weight files: magic, version byte, u32 count, then per tensor a
//! u16-prefixed UTF-8 name, u8 rank, u32 dims and little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGWT";
const VERSION: u8 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, p) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        let shape = p.tensor.shape();
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.len() * 4);
        for v in p.tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a checkpoint into a fresh store. Names ending in
/// `running_mean`/`running_var` or starting with `meta.` load as buffers.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let magic = read_exact(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::Format("not an MGWT checkpoint".into()));
    }
    let version = read_exact(&mut r, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let lb = read_exact(&mut r, 2)?;
        let len = u16::from_le_bytes([lb[0], lb[1]]) as usize;
        let name = String::from_utf8(read_exact(&mut r, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_exact(&mut r, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let trainable = !(name.ends_with(".running_mean")
            || name.ends_with(".running_var")
            || name.starts_with("meta."));
        store.insert(&name, Tensor::new(&shape, data)?, trainable)?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
