//! Binary PGM (P5) export and import of masks.

use std::fs;
use std::path::Path;

use super::BinaryMask;
use crate::error::{Error, Result};

pub fn encode(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode(bytes: &[u8]) -> Result<BinaryMask> {
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM magic {:?}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    let half = maxval.div_ceil(2) as u8;
    BinaryMask::from_bits(h, w, pixels.iter().map(|&p| p >= half).collect())
}

pub fn save(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(mask)).map_err(|e| Error::path_io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::path_io(path, e))?)
}
