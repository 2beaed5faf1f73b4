//! The C call interface and the file formats of the external range coder,
//! exercised with an in-process mock that speaks the same ABI.

use stereocodec::bitio::{
    decode_files, encode_files, gau_to_bytes, rcs_from_bytes, sym_from_bytes, sym_to_bytes, BypassCoder, ExternalCoder,
    SymbolCoder, STATUS_BUFFER_TOO_SMALL, STATUS_EXHAUSTED, STATUS_INVALID_ARGUMENT, STATUS_OK, STATUS_TABLE_MISMATCH,
};
use stereocodec::Error;

/// Stores `symbol - round(mu)` as little-endian i16 and rejects non-positive
/// scales, following the status codes of the interface.
unsafe extern "C" fn mock_encode(
    symbols: *const i16,
    n: usize,
    mu: *const f32,
    sigma: *const f32,
    out: *mut u8,
    out_len: *mut usize,
) -> i32 {
    let (s, m, g) = (std::slice::from_raw_parts(symbols, n), std::slice::from_raw_parts(mu, n), std::slice::from_raw_parts(sigma, n));
    if g.iter().any(|&v| !(v > 0.0)) {
        return STATUS_INVALID_ARGUMENT;
    }
    let need = 2 * n;
    if *out_len < need {
        *out_len = need;
        return STATUS_BUFFER_TOO_SMALL;
    }
    let dst = std::slice::from_raw_parts_mut(out, need);
    for i in 0..n {
        let r = s[i].wrapping_sub(m[i].round() as i16);
        dst[2 * i..2 * i + 2].copy_from_slice(&r.to_le_bytes());
    }
    *out_len = need;
    STATUS_OK
}

unsafe extern "C" fn mock_decode(buf: *const u8, len: usize, n: usize, mu: *const f32, sigma: *const f32, out: *mut i16) -> i32 {
    let (b, m, g) = (std::slice::from_raw_parts(buf, len), std::slice::from_raw_parts(mu, n), std::slice::from_raw_parts(sigma, n));
    if g.iter().any(|&v| !(v > 0.0)) {
        return STATUS_INVALID_ARGUMENT;
    }
    if len < 2 * n {
        return STATUS_EXHAUSTED;
    }
    if len > 2 * n {
        return STATUS_TABLE_MISMATCH;
    }
    let dst = std::slice::from_raw_parts_mut(out, n);
    for i in 0..n {
        dst[i] = i16::from_le_bytes([b[2 * i], b[2 * i + 1]]).wrapping_add(m[i].round() as i16);
    }
    STATUS_OK
}

fn mock() -> ExternalCoder {
    // SAFETY: the mocks honour the documented pointer/length contract.
    unsafe { ExternalCoder::new(mock_encode, mock_decode) }
}

fn sample(n: usize) -> (Vec<i16>, Vec<f32>, Vec<f32>) {
    let symbols = (0..n).map(|i| (i as i16 * 37) % 101 - 50).collect();
    let mu = (0..n).map(|i| (i % 7) as f32 - 3.2).collect();
    let sigma = (0..n).map(|i| 0.2 + (i % 5) as f32).collect();
    (symbols, mu, sigma)
}

#[test]
fn external_coder_round_trips_through_the_c_interface() {
    let coder = mock();
    for n in [0, 1, 17, 5000] {
        let (s, mu, sigma) = sample(n);
        let bytes = coder.encode(&s, &mu, &sigma).unwrap();
        assert_eq!(bytes.len(), 2 * n);
        assert_eq!(coder.decode(&bytes, n, &mu, &sigma).unwrap(), s);
    }
}

/// Demands a worst-case buffer of 4 bytes per symbol before writing 2.
unsafe extern "C" fn greedy_encode(
    symbols: *const i16,
    n: usize,
    mu: *const f32,
    sigma: *const f32,
    out: *mut u8,
    out_len: *mut usize,
) -> i32 {
    if *out_len < 4 * n {
        *out_len = 4 * n;
        return STATUS_BUFFER_TOO_SMALL;
    }
    mock_encode(symbols, n, mu, sigma, out, out_len)
}

#[test]
fn undersized_buffers_are_regrown() {
    // SAFETY: as in `mock`.
    let coder = unsafe { ExternalCoder::new(greedy_encode, mock_decode) };
    let (s, mu, sigma) = sample(10_000);
    let bytes = coder.encode(&s, &mu, &sigma).unwrap();
    assert_eq!(bytes.len(), 20_000);
    assert_eq!(coder.decode(&bytes, s.len(), &mu, &sigma).unwrap(), s);
}

#[test]
fn status_codes_map_to_errors() {
    let coder = mock();
    let (s, mu, mut sigma) = sample(8);
    let bytes = coder.encode(&s, &mu, &sigma).unwrap();
    assert!(matches!(coder.decode(&bytes[..10], 8, &mu, &sigma), Err(Error::Decode(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(coder.decode(&long, 8, &mu, &sigma), Err(Error::Decode(_))));
    sigma[3] = 0.0;
    assert!(matches!(coder.encode(&s, &mu, &sigma), Err(Error::InvalidArgument(_))));
    assert!(matches!(coder.encode(&s, &mu[..7], &sigma), Err(Error::InvalidArgument(_))));
}

#[test]
fn file_mode_round_trip_with_both_coders() {
    let dir = tempfile::tempdir().unwrap();
    let (s, mu, sigma) = sample(333);
    let sym = dir.path().join("in.sym");
    let gau = dir.path().join("in.gau");
    std::fs::write(&sym, sym_to_bytes(&s).unwrap()).unwrap();
    std::fs::write(&gau, gau_to_bytes(&mu, &sigma).unwrap()).unwrap();
    let coders: [&dyn SymbolCoder; 2] = [&BypassCoder, &mock()];
    for coder in coders {
        let rcs = dir.path().join(format!("{}.rcs", coder.name()));
        let out = dir.path().join(format!("{}.sym", coder.name()));
        let stream = encode_files(coder, &sym, &gau, &rcs).unwrap();
        assert_eq!(rcs_from_bytes(&std::fs::read(&rcs).unwrap()).unwrap(), stream);
        assert_eq!(decode_files(coder, &rcs, &gau, &out).unwrap(), s);
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&sym).unwrap());
    }
}

#[test]
fn file_headers_are_little_endian_counts() {
    let sym = sym_to_bytes(&[1, -2, 0x1234]).unwrap();
    assert_eq!(sym, [3, 0, 0, 0, 1, 0, 0xfe, 0xff, 0x34, 0x12]);
    assert_eq!(sym_from_bytes(&sym).unwrap(), [1, -2, 0x1234]);
    let gau = gau_to_bytes(&[1.0], &[2.0]).unwrap();
    assert_eq!(gau, [1, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0, 0, 0x40]);
    let rcs = rcs_from_bytes(&[5, 0, 0, 0, 2, 0, 0, 0, 0xaa, 0xbb]).unwrap();
    assert_eq!((rcs.symbols, rcs.bytes), (5, vec![0xaa, 0xbb]));
    assert!(rcs_from_bytes(&[5, 0, 0, 0, 3, 0, 0, 0, 0xaa, 0xbb]).is_err());
    assert!(sym_from_bytes(&[2, 0, 0, 0, 1, 0]).is_err());
}
