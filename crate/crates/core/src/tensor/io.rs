//! Binary tensor fixtures: magic `FT4\0`, four little-endian `u64` dims
//! (n, c, h, w), then the `f32` little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FT4\0";
pub const HEADER_LEN: usize = 4 + 4 * 8;

pub fn encoded_len(shape: Shape4) -> usize {
    HEADER_LEN + 4 * shape.len()
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor4) -> std::io::Result<()> {
    let s = t.shape();
    w.write_all(&MAGIC)?;
    for d in [s.n, s.c, s.h, s.w] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.data().len());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("tensor dimension overflows usize".into()))?;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor shape {shape} overflows")))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor4::new(shape, data)
}

pub fn to_bytes(t: &Tensor4) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor4> {
    read_tensor(bytes)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::path_io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).map_err(|e| Error::path_io(path, e))?;
    w.flush().map_err(|e| Error::path_io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::path_io(path, e))?;
    read_tensor(BufReader::new(f))
}
