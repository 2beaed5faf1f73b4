#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use stereocodec::bitio::BypassCoder;
use stereocodec::codec::{decode_gop_with, Container, StereoCodec};
use stereocodec::config::CodecConfig;
use stereocodec::nn::ParamStore;

fn model() -> &'static (StereoCodec, ParamStore<f32>) {
    static MODEL: OnceLock<(StereoCodec, ParamStore<f32>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
        let store = codec.init_params(0);
        (codec, store)
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(container) = Container::from_bytes(data) else { return };
    // Keep iterations fast: the model runs at full size on every frame.
    if container.width > 256 || container.height > 256 || container.frames.len() > 8 {
        return;
    }
    let (codec, store) = model();
    let _ = decode_gop_with(codec, store, &container, &BypassCoder);
});
