#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = checkpoint::from_bytes(data) {
        assert_eq!(checkpoint::to_bytes(&store).unwrap(), data);
    }
});
