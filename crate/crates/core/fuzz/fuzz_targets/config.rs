#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::config::CodecConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = CodecConfig::parse(text) {
        assert_eq!(CodecConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
});
