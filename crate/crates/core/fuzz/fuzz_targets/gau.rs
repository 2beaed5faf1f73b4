#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::bitio::{gau_from_bytes, gau_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok((mu, sigma)) = gau_from_bytes(data) {
        assert_eq!(gau_to_bytes(&mu, &sigma).unwrap(), data);
    }
});
