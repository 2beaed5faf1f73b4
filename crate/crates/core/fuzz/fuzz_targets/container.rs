#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::codec::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        // Anything accepted must serialize back to the same bytes.
        assert_eq!(c.to_bytes().unwrap(), data);
    }
});
