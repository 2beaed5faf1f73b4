#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::bitio::{get_exp_golomb, get_signed, BitReader, BypassCoder, SymbolCoder};

fuzz_target!(|data: &[u8]| {
    let mut r = BitReader::new(data);
    while get_exp_golomb(&mut r).is_ok() {}
    let mut r = BitReader::new(data);
    while get_signed(&mut r).is_ok() {}
    let n = data.len() * 8;
    let zeros = vec![0.0f32; n];
    let ones = vec![1.0f32; n];
    if let Ok(symbols) = BypassCoder.decode(data, n, &zeros, &ones) {
        let again = BypassCoder.encode(&symbols, &zeros, &ones).unwrap();
        assert_eq!(BypassCoder.decode(&again, n, &zeros, &ones).unwrap(), symbols);
    }
});
