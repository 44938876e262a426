use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{io as ft4, Shape4, Tensor4};

pub const COMPACT_MAGIC: [u8; 4] = *b"FC4\0";

/// A tensor restricted to a subset of spatial positions.
///
/// The dropped positions are stored as `(start, len)` runs over the
/// row-major plane index; kept values follow sample-major, then channel, then
/// kept pixel. The header is narrower than the dense FT4 header, so dropping
/// any pixel of a tensor with two or more planes shrinks the encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactTensor {
    shape: Shape4,
    gaps: Vec<(u32, u32)>,
    kept: usize,
    values: Vec<f32>,
}

const COMPACT_HEADER: usize = 4 + 4 * 4 + 4;

/// Kept `(start, end)` ranges between the gaps of a `plane`-long index space.
fn kept_ranges(gaps: &[(u32, u32)], plane: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let ends = gaps.iter().map(|&(s, _)| s as usize).chain(std::iter::once(plane));
    let starts = std::iter::once(0).chain(gaps.iter().map(|&(s, l)| (s + l) as usize));
    starts.zip(ends).filter(|(a, b)| a < b)
}

impl CompactTensor {
    pub fn from_tensor(t: &Tensor4, keep: &BinaryMask) -> Result<Self> {
        let s = t.shape();
        if keep.dims() != (s.h, s.w) {
            return Err(Error::shape("compact", s, keep.dims()));
        }
        let too_big = |v: usize| u32::try_from(v).is_err();
        if [s.n, s.c, s.h, s.w, s.plane()].into_iter().any(too_big) {
            return Err(Error::contract(format!("tensor {s} too large to compact")));
        }
        let mut gaps: Vec<(u32, u32)> = Vec::new();
        for i in (0..s.plane()).filter(|&i| !keep.get_index(i)) {
            match gaps.last_mut() {
                Some((start, len)) if (*start + *len) as usize == i => *len += 1,
                _ => gaps.push((i as u32, 1)),
            }
        }
        let kept = keep.active_count();
        let mut values = Vec::with_capacity(s.n * s.c * kept);
        for n in 0..s.n {
            for c in 0..s.c {
                let p = t.plane(n, c);
                for (a, b) in kept_ranges(&gaps, s.plane()) {
                    values.extend_from_slice(&p[a..b]);
                }
            }
        }
        Ok(CompactTensor { shape: s, gaps, kept, values })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn kept_pixels(&self) -> usize {
        self.kept
    }

    /// Dropped `(start, len)` runs.
    pub fn gaps(&self) -> &[(u32, u32)] {
        &self.gaps
    }

    /// Whether plane position `i` was stored.
    pub fn covers(&self, i: usize) -> bool {
        if i >= self.shape.plane() {
            return false;
        }
        let at = self.gaps.partition_point(|&(s, _)| s as usize <= i);
        !(at > 0 && {
            let (s, l) = self.gaps[at - 1];
            i < (s + l) as usize
        })
    }

    /// Full tensor with dropped positions set to zero.
    pub fn reconstruct(&self) -> Tensor4 {
        let s = self.shape;
        let mut t = Tensor4::zeros(s);
        let mut src = self.values.iter();
        for n in 0..s.n {
            for c in 0..s.c {
                let p = t.plane_mut(n, c);
                for (a, b) in kept_ranges(&self.gaps, s.plane()) {
                    for (dst, v) in p[a..b].iter_mut().zip(&mut src) {
                        *dst = *v;
                    }
                }
            }
        }
        t
    }

    pub fn encoded_len(&self) -> usize {
        COMPACT_HEADER + 8 * self.gaps.len() + 4 * self.values.len()
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let s = self.shape;
        out.extend_from_slice(&COMPACT_MAGIC);
        for d in [s.n, s.c, s.h, s.w, self.gaps.len()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &(start, len) in &self.gaps {
            out.extend_from_slice(&start.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != COMPACT_MAGIC {
            return Err(Error::Format("bad compact tensor magic".into()));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let plane = shape.h.checked_mul(shape.w).ok_or_else(|| Error::Format("plane overflow".into()))?;
        let mut gaps = Vec::with_capacity(dims[4].min(plane));
        let mut dropped = 0usize;
        let mut end = 0usize;
        for _ in 0..dims[4] {
            let (start, len) = (r.u32()?, r.u32()?);
            if len == 0 || (start as usize) < end || start as usize + len as usize > plane {
                return Err(Error::Format("compact gaps empty, out of order or out of range".into()));
            }
            end = start as usize + len as usize;
            dropped += len as usize;
            gaps.push((start, len));
        }
        let kept = plane - dropped;
        let count = shape.n * shape.c * kept;
        let values = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r.finish()?;
        Ok(CompactTensor { shape, gaps, kept, values })
    }
}

/// Immutable cached value.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Tensor(Tensor4),
    Stats(Vec<f32>),
    Compacted(CompactTensor),
}

impl Payload {
    pub fn kind(&self) -> u8 {
        match self {
            Payload::Tensor(_) => 0,
            Payload::Stats(_) => 1,
            Payload::Compacted(_) => 2,
        }
    }

    /// Size of [`encode`](Self::encode)'s output.
    pub fn byte_len(&self) -> u64 {
        (match self {
            Payload::Tensor(t) => ft4::encoded_len(t.shape()),
            Payload::Stats(v) => 8 + 4 * v.len(),
            Payload::Compacted(c) => c.encoded_len(),
        }) as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::Tensor(t) => ft4::to_bytes(t),
            Payload::Stats(v) => {
                let mut out = Vec::with_capacity(8 + 4 * v.len());
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out
            }
            Payload::Compacted(c) => {
                let mut out = Vec::with_capacity(c.encoded_len());
                c.encode_into(&mut out);
                out
            }
        }
    }

    pub fn decode(kind: u8, bytes: &[u8]) -> Result<Payload> {
        match kind {
            0 => Ok(Payload::Tensor(ft4::from_bytes(bytes)?)),
            1 => {
                let mut r = Reader(bytes);
                let n = r.u64()? as usize;
                let v = r
                    .take(n.checked_mul(4).ok_or_else(|| Error::Format("stats length overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                r.finish()?;
                Ok(Payload::Stats(v))
            }
            2 => Ok(Payload::Compacted(CompactTensor::decode(bytes)?)),
            k => Err(Error::Format(format!("unknown payload kind {k}"))),
        }
    }

    /// Dense view; compacted payloads are zero at dropped positions.
    pub fn to_tensor(&self) -> Result<Tensor4> {
        match self {
            Payload::Tensor(t) => Ok(t.clone()),
            Payload::Compacted(c) => Ok(c.reconstruct()),
            Payload::Stats(_) => Err(Error::contract("payload holds statistics, not a tensor")),
        }
    }

    pub fn as_stats(&self) -> Result<&[f32]> {
        match self {
            Payload::Stats(v) => Ok(v),
            _ => Err(Error::contract("payload holds a tensor, not statistics")),
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("truncated payload".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if !self.0.is_empty() {
            return Err(Error::Format(format!("{} trailing payload bytes", self.0.len())));
        }
        Ok(())
    }
}
