#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::bitio::{rcs_from_bytes, rcs_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(stream) = rcs_from_bytes(data) {
        assert_eq!(rcs_to_bytes(&stream).unwrap(), data);
    }
});
