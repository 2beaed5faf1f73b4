//! Weight checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    4 bytes "SCKP"
//! version  u16
//! count    u32
//! entries  count × { name_len u16, name (UTF-8), rank u8, rank × u32 dim, f32 data }
//! crc32    u32 over every preceding byte
//! ```
//!
//! Entries are written in name order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u16 = 1;
const MAX_RANK: usize = 8;

pub fn to_bytes(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::InvalidArgument("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let nlen = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: dimension exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn take<'a>(data: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if n > data.len() - *pos {
        return Err(Error::Decode(format!("checkpoint truncated at byte {}", *pos)));
    }
    let s = &data[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn from_bytes(data: &[u8]) -> Result<ParamStore<f32>> {
    if data.len() < 14 || &data[..4] != MAGIC {
        return Err(Error::Decode("not a checkpoint".into()));
    }
    let (body, tail) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut pos = 4;
    let version = u16::from_le_bytes(take(body, &mut pos, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = u32::from_le_bytes(take(body, &mut pos, 4)?.try_into().expect("4 bytes"));
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(body, &mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(body, &mut pos, nlen)?)
            .map_err(|_| Error::Decode("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = take(body, &mut pos, 1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::Decode(format!("{name}: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(body, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            numel = numel.checked_mul(d).ok_or_else(|| Error::Decode(format!("{name}: size overflow")))?;
            shape.push(d);
        }
        let bytes = numel.checked_mul(4).ok_or_else(|| Error::Decode(format!("{name}: size overflow")))?;
        let raw = take(body, &mut pos, bytes)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if store.contains(&name) {
            return Err(Error::Decode(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::from_vec(&shape, values)?);
    }
    if pos != body.len() {
        return Err(Error::Decode("trailing bytes after the last entry".into()));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.init_conv(&mut rng, "a.conv", 3, 4, 3, 1);
        store.insert("scalar", Tensor::scalar(-2.5f32));
        let bytes = to_bytes(&store).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for (k, v) in store.iter() {
            assert_eq!(back.get(k), v);
        }
    }

    #[test]
    fn rejects_damage() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::<f32>::ones(&[2, 2]));
        let bytes = to_bytes(&store).unwrap();
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(matches!(from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
