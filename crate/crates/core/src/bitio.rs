//! Bit-level I/O, the Exp-Golomb bypass serializer and the boundary to an
//! external range coder.
//!
//! # External coder call interface
//!
//! ```text
//! int32 rc_encode(const int16 *symbols, size_t n, const float *mu, const float *sigma,
//!                 uint8 *out_buf, size_t *out_len);
//! int32 rc_decode(const uint8 *buf, size_t len, size_t n, const float *mu, const float *sigma,
//!                 int16 *out_symbols);
//! ```
//!
//! `*out_len` holds the buffer capacity on entry and the number of bytes
//! written on success. When the buffer is too small the coder returns
//! [`STATUS_BUFFER_TOO_SMALL`] and may store the required size in `*out_len`.
//!
//! # Offline file formats (little-endian)
//!
//! | file   | layout                                                    |
//! |--------|-----------------------------------------------------------|
//! | `.sym` | `u32 n`, `n × i16` symbols                                |
//! | `.gau` | `u32 n`, `n × f32` means, `n × f32` scales                |
//! | `.rcs` | `u32 n` (symbol count), `u32 len`, `len` payload bytes    |

use std::path::Path;

use crate::error::{Error, Result};

pub const STATUS_OK: i32 = 0;
pub const STATUS_INVALID_ARGUMENT: i32 = 1;
pub const STATUS_BUFFER_TOO_SMALL: i32 = 2;
pub const STATUS_EXHAUSTED: i32 = 3;
pub const STATUS_TABLE_MISMATCH: i32 = 4;

/// Longest accepted Exp-Golomb prefix.
pub const MAX_PREFIX_ZEROS: u32 = 32;

#[derive(Default, Debug, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bit(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.used += 1;
        if self.used == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.used = 0;
        }
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn put_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.put_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8 + self.used as usize
    }

    /// Pads the final byte with zero bits.
    pub fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.bytes.push(self.acc << (8 - self.used));
        }
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0 }
    }

    pub fn get_bit(&mut self) -> Result<bool> {
        let byte = self
            .data
            .get(self.pos / 8)
            .ok_or_else(|| Error::Decode("bit stream exhausted".into()))?;
        let bit = (byte >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn get_bits(&mut self, n: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.get_bit()? as u64;
        }
        Ok(v)
    }

    pub fn bits_read(&self) -> usize {
        self.pos
    }
}

/// Order-0 Exp-Golomb code of `value`.
pub fn put_exp_golomb(w: &mut BitWriter, value: u32) {
    let v = value as u64 + 1;
    let bits = 64 - v.leading_zeros();
    w.put_bits(0, bits - 1);
    w.put_bits(v, bits);
}

pub fn get_exp_golomb(r: &mut BitReader) -> Result<u32> {
    let mut zeros = 0;
    while !r.get_bit()? {
        zeros += 1;
        if zeros > MAX_PREFIX_ZEROS {
            return Err(Error::Decode("Exp-Golomb prefix too long".into()));
        }
    }
    let rest = r.get_bits(zeros)?;
    let v = (1u64 << zeros) | rest;
    u32::try_from(v - 1).map_err(|_| Error::Decode("Exp-Golomb value out of range".into()))
}

/// Magnitude as Exp-Golomb followed by a sign bit for nonzero values.
pub fn put_signed(w: &mut BitWriter, value: i32) {
    put_exp_golomb(w, value.unsigned_abs());
    if value != 0 {
        w.put_bit(value < 0);
    }
}

pub fn get_signed(r: &mut BitReader) -> Result<i32> {
    let mag = get_exp_golomb(r)?;
    if mag == 0 {
        return Ok(0);
    }
    let neg = r.get_bit()?;
    let mag = i64::from(mag);
    let v = if neg { -mag } else { mag };
    i32::try_from(v).map_err(|_| Error::Decode("signed Exp-Golomb value out of range".into()))
}

/// Serializes integer symbols under per-element Gaussian parameters.
pub trait SymbolCoder {
    fn encode(&self, symbols: &[i16], mu: &[f32], sigma: &[f32]) -> Result<Vec<u8>>;
    fn decode(&self, bytes: &[u8], n: usize, mu: &[f32], sigma: &[f32]) -> Result<Vec<i16>>;
    fn name(&self) -> &'static str;
}

fn check_lengths(n: usize, mu: &[f32], sigma: &[f32]) -> Result<()> {
    if mu.len() != n || sigma.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} symbols but {} means and {} scales",
            mu.len(),
            sigma.len()
        )));
    }
    Ok(())
}

/// Exp-Golomb serializer that ignores the Gaussian parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct BypassCoder;

impl SymbolCoder for BypassCoder {
    fn encode(&self, symbols: &[i16], mu: &[f32], sigma: &[f32]) -> Result<Vec<u8>> {
        check_lengths(symbols.len(), mu, sigma)?;
        let mut w = BitWriter::new();
        for &s in symbols {
            put_signed(&mut w, s as i32);
        }
        Ok(w.finish())
    }

    fn decode(&self, bytes: &[u8], n: usize, mu: &[f32], sigma: &[f32]) -> Result<Vec<i16>> {
        check_lengths(n, mu, sigma)?;
        let mut r = BitReader::new(bytes);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = get_signed(&mut r)?;
            out.push(i16::try_from(v).map_err(|_| Error::Decode(format!("symbol {v} outside int16")))?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "bypass"
    }
}

pub type EncodeFn = unsafe extern "C" fn(*const i16, usize, *const f32, *const f32, *mut u8, *mut usize) -> i32;
pub type DecodeFn = unsafe extern "C" fn(*const u8, usize, usize, *const f32, *const f32, *mut i16) -> i32;

/// Adapter over a coder reached through the C call interface.
#[derive(Clone, Copy)]
pub struct ExternalCoder {
    encode: EncodeFn,
    decode: DecodeFn,
}

fn status_error(status: i32, what: &str) -> Error {
    match status {
        STATUS_INVALID_ARGUMENT => Error::InvalidArgument(format!("{what}: coder rejected arguments")),
        STATUS_EXHAUSTED => Error::Decode(format!("{what}: stream exhausted")),
        STATUS_TABLE_MISMATCH => Error::Decode(format!("{what}: symbol does not fit its table")),
        other => Error::Decode(format!("{what}: coder status {other}")),
    }
}

impl ExternalCoder {
    /// # Safety
    /// Both functions must follow the documented call interface.
    pub unsafe fn new(encode: EncodeFn, decode: DecodeFn) -> Self {
        ExternalCoder { encode, decode }
    }
}

impl SymbolCoder for ExternalCoder {
    fn encode(&self, symbols: &[i16], mu: &[f32], sigma: &[f32]) -> Result<Vec<u8>> {
        check_lengths(symbols.len(), mu, sigma)?;
        let mut cap = 64 + 2 * symbols.len();
        for _ in 0..8 {
            let mut buf = vec![0u8; cap];
            let mut len = cap;
            // SAFETY: pointers come from live slices of the stated lengths and
            // `ExternalCoder::new` requires functions honouring the interface.
            let status = unsafe {
                (self.encode)(symbols.as_ptr(), symbols.len(), mu.as_ptr(), sigma.as_ptr(), buf.as_mut_ptr(), &mut len)
            };
            match status {
                STATUS_OK if len <= cap => {
                    buf.truncate(len);
                    return Ok(buf);
                }
                STATUS_OK => return Err(Error::Decode("coder reported more bytes than the buffer holds".into())),
                STATUS_BUFFER_TOO_SMALL => cap = if len > cap { len } else { cap * 2 },
                other => return Err(status_error(other, "encode")),
            }
        }
        Err(Error::Decode("coder kept requesting a larger buffer".into()))
    }

    fn decode(&self, bytes: &[u8], n: usize, mu: &[f32], sigma: &[f32]) -> Result<Vec<i16>> {
        check_lengths(n, mu, sigma)?;
        let mut out = vec![0i16; n];
        // SAFETY: as in `encode`.
        let status = unsafe { (self.decode)(bytes.as_ptr(), bytes.len(), n, mu.as_ptr(), sigma.as_ptr(), out.as_mut_ptr()) };
        if status != STATUS_OK {
            return Err(status_error(status, "decode"));
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

#[cfg(feature = "rangecoder")]
mod linked {
    extern "C" {
        pub fn rc_encode(symbols: *const i16, n: usize, mu: *const f32, sigma: *const f32, out: *mut u8, out_len: *mut usize) -> i32;
        pub fn rc_decode(buf: *const u8, len: usize, n: usize, mu: *const f32, sigma: *const f32, out: *mut i16) -> i32;
    }
}

/// Coder linked in at build time with the `rangecoder` feature.
#[cfg(feature = "rangecoder")]
pub fn linked_range_coder() -> ExternalCoder {
    // SAFETY: the linked library implements the documented interface.
    unsafe { ExternalCoder::new(linked::rc_encode, linked::rc_decode) }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Decode(format!("{} truncated at byte {}", self.what, self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Decode(format!("{} has {} trailing bytes", self.what, self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument("too many symbols for a u32 count".into()))
}

pub fn sym_to_bytes(symbols: &[i16]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 + 2 * symbols.len());
    out.extend_from_slice(&count(symbols.len())?.to_le_bytes());
    for s in symbols {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

pub fn sym_from_bytes(data: &[u8]) -> Result<Vec<i16>> {
    let mut c = Cursor { data, pos: 0, what: ".sym" };
    let n = c.u32()? as usize;
    let body = c.take(n.checked_mul(2).ok_or_else(|| Error::Decode(".sym count overflows".into()))?)?;
    c.finish()?;
    Ok(body.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect())
}

pub fn gau_to_bytes(mu: &[f32], sigma: &[f32]) -> Result<Vec<u8>> {
    check_lengths(mu.len(), mu, sigma)?;
    let mut out = Vec::with_capacity(4 + 8 * mu.len());
    out.extend_from_slice(&count(mu.len())?.to_le_bytes());
    for v in mu.iter().chain(sigma) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn gau_from_bytes(data: &[u8]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut c = Cursor { data, pos: 0, what: ".gau" };
    let n = c.u32()? as usize;
    let read = |c: &mut Cursor| -> Result<Vec<f32>> {
        let body = c.take(n.checked_mul(4).ok_or_else(|| Error::Decode(".gau count overflows".into()))?)?;
        Ok(body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };
    let mu = read(&mut c)?;
    let sigma = read(&mut c)?;
    c.finish()?;
    Ok((mu, sigma))
}

/// Coded stream with its declared symbol count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedStream {
    pub symbols: usize,
    pub bytes: Vec<u8>,
}

pub fn rcs_to_bytes(stream: &CodedStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + stream.bytes.len());
    out.extend_from_slice(&count(stream.symbols)?.to_le_bytes());
    out.extend_from_slice(&count(stream.bytes.len())?.to_le_bytes());
    out.extend_from_slice(&stream.bytes);
    Ok(out)
}

pub fn rcs_from_bytes(data: &[u8]) -> Result<CodedStream> {
    let mut c = Cursor { data, pos: 0, what: ".rcs" };
    let symbols = c.u32()? as usize;
    let len = c.u32()? as usize;
    let bytes = c.take(len)?.to_vec();
    c.finish()?;
    Ok(CodedStream { symbols, bytes })
}

/// Encodes a `.sym` + `.gau` pair into a `.rcs` file.
pub fn encode_files(coder: &dyn SymbolCoder, sym: &Path, gau: &Path, rcs: &Path) -> Result<CodedStream> {
    let symbols = sym_from_bytes(&std::fs::read(sym)?)?;
    let (mu, sigma) = gau_from_bytes(&std::fs::read(gau)?)?;
    let stream = CodedStream { symbols: symbols.len(), bytes: coder.encode(&symbols, &mu, &sigma)? };
    std::fs::write(rcs, rcs_to_bytes(&stream)?)?;
    Ok(stream)
}

/// Decodes a `.rcs` file with the parameters of a `.gau` file into a `.sym` file.
pub fn decode_files(coder: &dyn SymbolCoder, rcs: &Path, gau: &Path, sym: &Path) -> Result<Vec<i16>> {
    let stream = rcs_from_bytes(&std::fs::read(rcs)?)?;
    let (mu, sigma) = gau_from_bytes(&std::fs::read(gau)?)?;
    let symbols = coder.decode(&stream.bytes, stream.symbols, &mu, &sigma)?;
    std::fs::write(sym, sym_to_bytes(&symbols)?)?;
    Ok(symbols)
}
