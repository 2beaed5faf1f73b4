#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::bitio::{sym_from_bytes, sym_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(symbols) = sym_from_bytes(data) {
        assert_eq!(sym_to_bytes(&symbols).unwrap(), data);
    }
});
