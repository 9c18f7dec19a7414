//! Binary tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CVGT" | version u8 = 1 | dtype u8 = 1 (f32) | ndim u16 | ndim x u32 dims | f32 payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor, MAX_DIMS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVGT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.dims().len() as u16).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut head = [0u8; 8];
    cur.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", head[5])));
    }
    let ndim = u16::from_le_bytes([head[6], head[7]]) as usize;
    if ndim > MAX_DIMS {
        return Err(Error::Format(format!("ndim {ndim} exceeds {MAX_DIMS}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated dims".into()))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    if cur.len() != 4 * n {
        return Err(Error::Format(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            cur.len(),
            4 * n
        )));
    }
    let data = cur
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
}
