//! ADGT binary tensor format.
//!
//! Layout: magic `"ADGT"`, `u8` version (1), `u8` dtype (0 = f32), `u8` rank,
//! rank × `u32` little-endian extents, then the row-major f32 payload in
//! little-endian byte order. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ADGT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Encode a tensor to the ADGT byte layout.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Cursor over a byte buffer that reports the offset of any failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated: wanted {} bytes for {}, only {} left",
                    n,
                    what,
                    self.remaining()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decode one tensor from a cursor, leaving it positioned after the payload.
pub(crate) fn read_from(r: &mut Reader) -> Result<Tensor> {
    let start = r.offset();
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: start,
            reason: format!("bad magic {:?}, expected \"ADGT\"", magic),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: r.offset() - 1,
            reason: format!("unsupported version {}", version),
        });
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: r.offset() - 1,
            reason: format!("unsupported dtype {}", dtype),
        });
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = r.take(numel * 4, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Decode a tensor from a buffer that must contain exactly one tensor.
pub fn from_bytes(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    let t = read_from(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            reason: format!("{} trailing bytes after payload", r.remaining()),
        });
    }
    Ok(t)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let buf = std::fs::read(path)?;
    from_bytes(&buf)
}
