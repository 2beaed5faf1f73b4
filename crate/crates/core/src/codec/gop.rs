//! GOP orchestration: the first frame of every group is intra coded and the
//! rest run through the P-frame pipeline with a decoded buffer.

use crate::bitio::SymbolCoder;
use crate::config::CodecConfig;
use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;

use super::container::{Container, FrameRecord, FrameType, FLAG_EXTERNAL_CODER};
use super::frame::{aligned, StereoFrame};
use super::model::{DecodedBuffer, FrameLatents, StereoCodec, P_SEGMENTS_PER_VIEW};
use super::load_model;

/// Everything the encoder knows after coding a sequence.
#[derive(Clone, Debug)]
pub struct GopEncoding {
    pub container: Container,
    /// Encoder-side reconstructions at the original size.
    pub recon: Vec<StereoFrame>,
    /// Quantized latents of P-frames (`None` for intra frames).
    pub latents: Vec<Option<FrameLatents>>,
    /// Sum of model-estimated bits over all frames.
    pub bits_estimate: f64,
}

/// Decoder output.
#[derive(Clone, Debug)]
pub struct GopDecoding {
    pub frames: Vec<StereoFrame>,
    pub latents: Vec<Option<FrameLatents>>,
}

fn coder_flags(coder: &dyn SymbolCoder) -> u16 {
    if coder.name() == "bypass" {
        0
    } else {
        FLAG_EXTERNAL_CODER
    }
}

/// Encodes `frames` with groups of `gop` frames.
pub fn encode_gop(
    codec: &StereoCodec,
    store: &ParamStore<f32>,
    frames: &[StereoFrame],
    gop: usize,
    coder: &dyn SymbolCoder,
) -> Result<GopEncoding> {
    let first = frames.first().ok_or_else(|| invalid("nothing to encode"))?;
    if gop == 0 || gop > usize::from(u16::MAX) {
        return Err(invalid(format!("GOP size {gop} outside 1..=65535")));
    }
    let (h, w) = first.dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != (h, w)) {
        return Err(invalid(format!("frame {} is {:?}, expected {:?}", f.t, f.dims(), (h, w))));
    }
    let mut records = Vec::with_capacity(frames.len());
    let mut recon = Vec::with_capacity(frames.len());
    let mut latents = Vec::with_capacity(frames.len());
    let mut bits_estimate = 0.0;
    let mut buffer: Option<DecodedBuffer> = None;
    for (i, frame) in frames.iter().enumerate() {
        let padded = frame.padded();
        let (kind, segments, next, lat) = if i % gop == 0 {
            let l = codec.intra.encode(store, &padded.left, coder)?;
            let r = codec.intra.encode(store, &padded.right, coder)?;
            bits_estimate += l.bits_estimate + r.bits_estimate;
            let buf = codec.intra_buffer(store, [l.x_hat, r.x_hat])?;
            (FrameType::Intra, vec![l.payload, r.payload], buf, None)
        } else {
            let code = codec.encode_pframe(store, padded.views(), buffer.as_ref(), coder)?;
            bits_estimate += code.bits_estimate;
            let segs: Vec<Vec<u8>> = code.segments.into_iter().flatten().collect();
            (FrameType::Predicted, segs, code.buffer, Some(code.latents))
        };
        records.push(FrameRecord { kind, segments });
        let out = StereoFrame { left: next.x_hat[0].clone(), right: next.x_hat[1].clone(), t: frame.t };
        recon.push(out.cropped(h, w)?);
        latents.push(lat);
        buffer = Some(next);
    }
    let container = Container {
        gop: gop as u16,
        width: w as u32,
        height: h as u32,
        flags: coder_flags(coder),
        config: codec.cfg.to_text(),
        frames: records,
    };
    Ok(GopEncoding { container, recon, latents, bits_estimate })
}

/// Decodes a container with an explicit model.
pub fn decode_gop_with(
    codec: &StereoCodec,
    store: &ParamStore<f32>,
    container: &Container,
    coder: &dyn SymbolCoder,
) -> Result<GopDecoding> {
    if coder_flags(coder) != container.flags & FLAG_EXTERNAL_CODER {
        return Err(Error::Decode(format!("stream needs a different symbol coder than {:?}", coder.name())));
    }
    let (h, w) = (container.height as usize, container.width as usize);
    if h == 0 || w == 0 {
        return Err(Error::Decode("zero frame dimensions".into()));
    }
    let gop = usize::from(container.gop);
    if gop == 0 {
        return Err(Error::Decode("GOP size 0".into()));
    }
    let (ph, pw) = (aligned(h), aligned(w));
    let mut frames = Vec::with_capacity(container.frames.len());
    let mut latents = Vec::with_capacity(container.frames.len());
    let mut buffer: Option<DecodedBuffer> = None;
    for (i, rec) in container.frames.iter().enumerate() {
        let expected = if i % gop == 0 { FrameType::Intra } else { FrameType::Predicted };
        if rec.kind != expected {
            return Err(Error::Decode(format!("frame {i}: expected {expected:?}, found {:?}", rec.kind)));
        }
        let (next, lat) = match rec.kind {
            FrameType::Intra => {
                if rec.segments.len() != 2 {
                    return Err(Error::Decode(format!("frame {i}: intra record needs 2 segments")));
                }
                let l = codec.intra.decode(store, &rec.segments[0], ph, pw, coder)?;
                let r = codec.intra.decode(store, &rec.segments[1], ph, pw, coder)?;
                (codec.intra_buffer(store, [l, r])?, None)
            }
            FrameType::Predicted => {
                if rec.segments.len() != 2 * P_SEGMENTS_PER_VIEW {
                    return Err(Error::Decode(format!("frame {i}: P record needs {} segments", 2 * P_SEGMENTS_PER_VIEW)));
                }
                let (buf, lat) = codec.decode_pframe(store, &rec.segments, buffer.as_ref(), coder)?;
                (buf, Some(lat))
            }
        };
        let out = StereoFrame { left: next.x_hat[0].clone(), right: next.x_hat[1].clone(), t: i };
        frames.push(out.cropped(h, w)?);
        latents.push(lat);
        buffer = Some(next);
    }
    Ok(GopDecoding { frames, latents })
}

/// Decodes a container with the model described by its embedded config.
pub fn decode_gop(container: &Container, coder: &dyn SymbolCoder) -> Result<GopDecoding> {
    let cfg = CodecConfig::parse(&container.config).map_err(|e| Error::Decode(format!("embedded config: {e}")))?;
    let (codec, store) = load_model(cfg)?;
    decode_gop_with(&codec, &store, container, coder)
}
