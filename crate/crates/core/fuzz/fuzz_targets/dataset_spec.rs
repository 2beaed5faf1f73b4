#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::evalkit::DatasetSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = DatasetSpec::parse(text) {
        spec.validate().unwrap();
    }
});
