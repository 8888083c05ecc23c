//! Weight file: `"ROPW"`, version byte, config text, tensor manifest, then
//! row-major little-endian `f32` data for every tensor in manifest order.
//!
//! ```text
//! magic[4] version:u8 config_len:u32 config[config_len]
//! count:u32 { name_len:u16 name[name_len] rank:u8 dims:u32[rank] }*count
//! data: f32[*]
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ROPW";
pub const VERSION: u8 = 1;

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// `key=value` lines describing the model configuration.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.entries() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[2u8])?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for (_, t) in store.entries() {
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let magic = read_exact(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_exact(&mut r, 1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = read_u32(&mut r)? as usize;
    let config = String::from_utf8(read_exact(&mut r, config_len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let b = read_exact(&mut r, 2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = String::from_utf8(read_exact(&mut r, len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1)?[0];
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has rank {rank}"
                )))
            }
        };
        manifest.push((name, rows, cols));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in manifest {
        let bytes = read_exact(&mut r, rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { config, tensors })
}
