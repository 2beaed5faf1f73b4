//! Bitstream container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "SHDC"
//! version    u16
//! gop        u16
//! frames     u32      number of frame records
//! width      u32      original (unpadded) frame width
//! height     u32      original (unpadded) frame height
//! flags      u16      bit 0: payloads use the external range coder
//! config_len u32
//! config     config_len bytes of UTF-8 `key = value` text
//! records    frames × { type u8 (0 = I, 1 = P), nseg u8, nseg × u32 length, payloads }
//! crc32      u32      over every preceding byte
//! ```
//!
//! I-frame records carry `[intra L, intra R]`. P-frame records carry, per
//! view (left first), motion-hyper, motion-slices, context-hyper and
//! context-slices.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SHDC";
pub const VERSION: u16 = 1;
pub const FLAG_EXTERNAL_CODER: u16 = 1;
const FIXED_HEADER: usize = 4 + 2 + 2 + 4 + 4 + 4 + 2 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra = 0,
    Predicted = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub kind: FrameType,
    pub segments: Vec<Vec<u8>>,
}

impl FrameRecord {
    pub fn payload_len(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub gop: u16,
    pub width: u32,
    pub height: u32,
    pub flags: u16,
    pub config: String,
    pub frames: Vec<FrameRecord>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.data.len() - self.pos {
            return Err(Error::Decode(format!("container truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")))
}

impl Container {
    /// Bytes spent on everything except segment payloads.
    pub fn overhead_len(&self) -> usize {
        FIXED_HEADER + self.config.len() + self.frames.iter().map(|f| 2 + 4 * f.segments.len()).sum::<usize>() + 4
    }

    pub fn payload_len(&self) -> usize {
        self.frames.iter().map(FrameRecord::payload_len).sum()
    }

    /// Serialized size in bytes; equals `to_bytes().len()`.
    pub fn byte_len(&self) -> usize {
        self.overhead_len() + self.payload_len()
    }

    pub fn uses_external_coder(&self) -> bool {
        self.flags & FLAG_EXTERNAL_CODER != 0
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.gop.to_le_bytes());
        out.extend_from_slice(&len_u32(self.frames.len(), "frame count")?.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&len_u32(self.config.len(), "config")?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for f in &self.frames {
            let nseg = u8::try_from(f.segments.len()).map_err(|_| Error::InvalidArgument("more than 255 segments".into()))?;
            out.push(f.kind as u8);
            out.push(nseg);
            for s in &f.segments {
                out.extend_from_slice(&len_u32(s.len(), "segment")?.to_le_bytes());
            }
            for s in &f.segments {
                out.extend_from_slice(s);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < FIXED_HEADER + 4 {
            return Err(Error::Decode(format!("container of {} bytes is shorter than the header", data.len())));
        }
        if &data[..4] != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut c = Cursor { data: body, pos: 4 };
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let gop = c.u16()?;
        let nframes = c.u32()? as usize;
        let width = c.u32()?;
        let height = c.u32()?;
        let flags = c.u16()?;
        let clen = c.u32()? as usize;
        let config = std::str::from_utf8(c.take(clen)?)
            .map_err(|_| Error::Decode("config text is not UTF-8".into()))?
            .to_string();
        // Every record takes at least two bytes, which bounds the allocation.
        if nframes > (body.len() - c.pos) / 2 {
            return Err(Error::Decode(format!("{nframes} frame records cannot fit in the remaining bytes")));
        }
        let mut frames = Vec::with_capacity(nframes);
        for i in 0..nframes {
            let kind = match c.u8()? {
                0 => FrameType::Intra,
                1 => FrameType::Predicted,
                t => return Err(Error::Decode(format!("frame {i}: unknown type {t}"))),
            };
            let nseg = c.u8()? as usize;
            let lens: Vec<usize> = (0..nseg).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let segments = lens.iter().map(|&l| c.take(l).map(<[u8]>::to_vec)).collect::<Result<_>>()?;
            frames.push(FrameRecord { kind, segments });
        }
        if c.pos != body.len() {
            return Err(Error::Decode(format!("{} trailing bytes after the last record", body.len() - c.pos)));
        }
        Ok(Container { gop, width, height, flags, config, frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            gop: 21,
            width: 100,
            height: 70,
            flags: 0,
            config: "seed = 3\n".into(),
            frames: vec![
                FrameRecord { kind: FrameType::Intra, segments: vec![vec![1, 2, 3], vec![4]] },
                FrameRecord { kind: FrameType::Predicted, segments: (0..8).map(|i| vec![i as u8; i]).collect() },
            ],
        }
    }

    #[test]
    fn round_trip_and_accounting() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), c.byte_len());
        assert_eq!(c.byte_len(), c.payload_len() + c.overhead_len());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[30] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Version { found: 9, expected: 1 })));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
