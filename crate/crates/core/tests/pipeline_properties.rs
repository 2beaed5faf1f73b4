use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereocodec::autodiff::Tape;
use stereocodec::bitio::BypassCoder;
use stereocodec::codec::{encode_gop, StereoCodec, StereoFrame};
use stereocodec::config::CodecConfig;
use stereocodec::tensor::Tensor;
use stereocodec::train::{synth_clip, SynthConfig};

#[test]
fn warp_by_unit_flow_reads_the_right_neighbour() {
    let (c, h, w) = (2, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feat = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut flow = vec![0.0; 2 * h * w];
    flow[..h * w].fill(1.0);
    let mut tape = Tape::<f64>::inference();
    let f = tape.constant(feat.clone());
    let fl = tape.constant(Tensor::from_vec(&[2, h, w], flow).unwrap());
    let out = tape.warp(f, fl).unwrap();
    let out = tape.value(out);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Edge clamp: the last column samples itself.
                let src = (x + 1).min(w - 1);
                let i = |x: usize| (ci * h + y) * w + x;
                assert_eq!(out.data()[i(x)], feat.data()[i(src)], "c{ci} y{y} x{x}");
            }
        }
    }
}

fn bits(frames: &[StereoFrame]) -> Vec<Vec<u32>> {
    frames.iter().map(|f| f.left.data().iter().chain(f.right.data()).map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn later_frames_do_not_leak_into_earlier_ones() {
    let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
    let mut store = codec.init_params::<f32>(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Zero-initialised output heads would code every input identically.
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
    }
    let sc = SynthConfig { frames: 5, ..SynthConfig::default() };
    let frames = synth_clip(&sc, &mut rng).unwrap().frames;
    let mut altered = frames.clone();
    for f in &mut altered[3..] {
        f.left = f.left.map(|v| 1.0 - v);
        f.right = f.right.map(|_| 0.5);
    }
    let a = encode_gop(&codec, &store, &frames, 5, &BypassCoder).unwrap();
    let b = encode_gop(&codec, &store, &altered, 5, &BypassCoder).unwrap();
    assert_eq!(a.container.frames[..3], b.container.frames[..3]);
    assert_eq!(bits(&a.recon[..3]), bits(&b.recon[..3]));
    assert_ne!(a.container.frames[3], b.container.frames[3]);
}
