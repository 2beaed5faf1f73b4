//! Stereo P-frame codec, GOP orchestration and bitstream container.

pub mod container;
pub mod frame;
pub mod gop;
pub mod intra;
pub mod model;
pub mod motion;

use std::path::Path;

use crate::checkpoint;
use crate::config::CodecConfig;
use crate::error::Result;
use crate::nn::ParamStore;

pub use container::Container;
pub use frame::StereoFrame;
pub use gop::{decode_gop, decode_gop_with, encode_gop};
pub use model::{DecodedBuffer, StereoCodec};

/// Builds the model and its weights: from the configured checkpoint if one
/// is named, otherwise freshly initialized from the configured seed.
pub fn load_model(cfg: CodecConfig) -> Result<(StereoCodec, ParamStore<f32>)> {
    let codec = StereoCodec::new(cfg)?;
    let store = match &codec.cfg.checkpoint {
        Some(path) => {
            let store = checkpoint::load(Path::new(path))?;
            codec.check_params(&store)?;
            store
        }
        None => codec.init_params(codec.cfg.seed),
    };
    Ok((codec, store))
}
