//! Cold-tier record file.
//!
//! Record: `step`, `layer_id`, `role` as little-endian `u64`, one payload kind
//! byte, payload length as `u64`, payload bytes. A persisted spill file ends
//! with an index footer: per entry the key triple and the record offset
//! (four `u64`), then the entry count, the footer offset and [`SPILL_MAGIC`].

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::key::{CacheKey, Role};
use super::payload::Payload;
use crate::error::{Error, Result};

pub const SPILL_MAGIC: [u8; 4] = *b"FSPL";
const RECORD_HEADER: u64 = 3 * 8 + 1 + 8;

fn record_header(key: CacheKey, kind: u8, len: u64) -> [u8; RECORD_HEADER as usize] {
    let mut h = [0u8; RECORD_HEADER as usize];
    h[0..8].copy_from_slice(&(key.step as u64).to_le_bytes());
    h[8..16].copy_from_slice(&(key.layer_id as u64).to_le_bytes());
    h[16..24].copy_from_slice(&key.role.code().to_le_bytes());
    h[24] = kind;
    h[25..33].copy_from_slice(&len.to_le_bytes());
    h
}

fn parse_key(b: &[u8]) -> Result<CacheKey> {
    let field = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
    let narrow = |v: u64| u32::try_from(v).map_err(|_| Error::Format(format!("key field {v} overflows u32")));
    Ok(CacheKey::new(narrow(field(0))?, narrow(field(1))?, Role::from_code(field(2))?))
}

/// Location of a payload inside the cold-tier file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct SpillSlot {
    pub offset: u64,
    pub len: u64,
    pub kind: u8,
}

/// Append-only anonymous temporary file backing the cold tier.
#[derive(Debug)]
pub(crate) struct ColdTier {
    file: File,
    end: u64,
}

impl ColdTier {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(d) => tempfile::tempfile_in(d).map_err(|e| Error::path_io(d, e))?,
            None => tempfile::tempfile()?,
        };
        Ok(ColdTier { file, end: 0 })
    }

    pub fn append(&mut self, key: CacheKey, payload: &Payload) -> Result<SpillSlot> {
        let bytes = payload.encode();
        self.file.seek(SeekFrom::Start(self.end))?;
        self.file.write_all(&record_header(key, payload.kind(), bytes.len() as u64))?;
        self.file.write_all(&bytes)?;
        let slot = SpillSlot {
            offset: self.end + RECORD_HEADER,
            len: bytes.len() as u64,
            kind: payload.kind(),
        };
        self.end = slot.offset + slot.len;
        Ok(slot)
    }

    pub fn read(&mut self, slot: SpillSlot) -> Result<Payload> {
        self.file.seek(SeekFrom::Start(slot.offset))?;
        let mut buf = vec![0u8; slot.len as usize];
        self.file.read_exact(&mut buf)?;
        Payload::decode(slot.kind, &buf)
    }
}

/// Writes every entry plus the index footer to `path`.
pub fn save_spill<'a>(path: &Path, entries: impl IntoIterator<Item = (CacheKey, &'a Payload)>) -> Result<()> {
    let mut out = Vec::new();
    let mut index = Vec::new();
    for (key, payload) in entries {
        index.push((key, out.len() as u64));
        let bytes = payload.encode();
        out.extend_from_slice(&record_header(key, payload.kind(), bytes.len() as u64));
        out.extend_from_slice(&bytes);
    }
    let footer = out.len() as u64;
    for (key, off) in &index {
        for v in [key.step as u64, key.layer_id as u64, key.role.code(), *off] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&footer.to_le_bytes());
    out.extend_from_slice(&SPILL_MAGIC);
    fs::write(path, out).map_err(|e| Error::path_io(path, e))
}

/// Reads a file written by [`save_spill`], in index order.
pub fn load_spill(path: &Path) -> Result<Vec<(CacheKey, Payload)>> {
    let bytes = fs::read(path).map_err(|e| Error::path_io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || bytes[bytes.len() - 4..] != SPILL_MAGIC {
        return Err(bad("not a spill file"));
    }
    let tail = bytes.len() - 20;
    let count = u64::from_le_bytes(bytes[tail..tail + 8].try_into().unwrap()) as usize;
    let footer = u64::from_le_bytes(bytes[tail + 8..tail + 16].try_into().unwrap()) as usize;
    if count.checked_mul(32).and_then(|n| n.checked_add(footer)) != Some(tail) {
        return Err(bad("inconsistent footer"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let entry = &bytes[footer + 32 * i..footer + 32 * (i + 1)];
        let key = parse_key(&entry[..24])?;
        let off = u64::from_le_bytes(entry[24..32].try_into().unwrap()) as usize;
        let header = bytes
            .get(off..off + RECORD_HEADER as usize)
            .filter(|_| off + (RECORD_HEADER as usize) <= footer)
            .ok_or_else(|| bad("record offset out of range"))?;
        if parse_key(&header[..24])? != key {
            return Err(bad("record key disagrees with index"));
        }
        let len = u64::from_le_bytes(header[25..33].try_into().unwrap()) as usize;
        let start = off + RECORD_HEADER as usize;
        let body = start
            .checked_add(len)
            .filter(|&e| e <= footer)
            .map(|e| &bytes[start..e])
            .ok_or_else(|| bad("record overruns footer"))?;
        out.push((key, Payload::decode(header[24], body)?));
    }
    Ok(out)
}
