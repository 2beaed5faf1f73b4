//! The five-stage stereo P-frame pipeline: motion estimation, motion
//! compression, motion compensation, contextual compression and frame
//! reconstruction. Graph builders are generic over the scalar type so the
//! same code serves training, gradient checks and bit-exact inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bitio::SymbolCoder;
use crate::config::CodecConfig;
use crate::em::{EmEncoding, EntropyModel};
use crate::error::{invalid, shape, Error, Result};
use crate::fer;
use crate::nn::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::intra::IntraCodec;
use super::motion::{block_match, MotionField};

/// Streams per view in a P-frame record, in container order.
pub const P_SEGMENTS_PER_VIEW: usize = 4;

/// Previous reconstructions and features of both views.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBuffer {
    pub x_hat: [Tensor<f32>; 2],
    pub feat: [Tensor<f32>; 2],
}

/// Differentiable rates of one view, in bits.
#[derive(Clone, Copy, Debug)]
pub struct StreamBits {
    pub motion_y: Var,
    pub motion_z: Var,
    pub context_y: Var,
    pub context_z: Var,
}

/// Training-mode output of one P-frame.
pub struct PFrameTrain {
    pub x_hat: [Var; 2],
    pub feat: [Var; 2],
    pub bits: [StreamBits; 2],
}

/// Quantized latents of one coded frame, kept for symmetry checks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLatents {
    pub motion: [Tensor<f32>; 2],
    pub context: [Tensor<f32>; 2],
}

/// Encoder-side result of one P-frame.
#[derive(Clone, Debug)]
pub struct PFrameCode {
    /// Per view: motion-hyper, motion-slices, context-hyper, context-slices.
    pub segments: [[Vec<u8>; P_SEGMENTS_PER_VIEW]; 2],
    pub buffer: DecodedBuffer,
    pub latents: FrameLatents,
    pub bits_estimate: f64,
}

/// Model topology derived from a configuration. Weights live in a separate
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct StereoCodec {
    pub cfg: CodecConfig,
    pub mv_em: EntropyModel,
    pub ctx_em: EntropyModel,
    pub intra: IntraCodec,
}

fn pair<T>(a: [T; 2]) -> (T, T) {
    let [l, r] = a;
    (l, r)
}

impl StereoCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mv_em = EntropyModel::new("em.mv", cfg.motion_em())?;
        let ctx_em = EntropyModel::new("em.ctx", cfg.context_em())?;
        let intra = IntraCodec { kind: cfg.intra, channels: cfg.intra_channels, sigma_min: cfg.sigma_min };
        Ok(StereoCodec { cfg, mv_em, ctx_em, intra })
    }

    /// Same topology with a modified configuration (runtime switches only).
    pub fn with_switches(&self, fer: bool, cross_view: bool) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.fer = fer;
        cfg.cross_view = cross_view;
        Self::new(cfg)
    }

    /// Fresh weights from `seed`. Every parameter is registered regardless
    /// of the runtime switches so checkpoints stay interchangeable.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &self.cfg;
        let mut s = ParamStore::new();
        let (cm, cc, cf) = (c.motion_channels, c.context_channels, c.feature_channels);
        s.init_conv(rng, "me.r0", 8, cm, 3, 1);
        s.init_conv(rng, "me.r1", cm, 2, 3, 1);
        s.zero_prefix("me.r1.");
        for i in 0..4 {
            s.init_conv(rng, &format!("mv.e{i}"), if i == 0 { 2 } else { cm }, if i == 3 { c.motion_latent_channels } else { cm }, 3, 1);
            s.init_deconv(rng, &format!("mv.d{i}"), if i == 0 { c.motion_latent_channels } else { cm }, if i == 3 { 2 } else { cm }, 4);
        }
        for &stride in &c.fer_strides {
            for (path, ch) in [("mv", cm), ("ctx", cc)] {
                for stage in ['e', 'd'] {
                    fer::init_block(&mut s, rng, &format!("fer.{path}.{stage}{stride}"), ch, c.fer_downsample, true);
                }
            }
        }
        s.init_conv(rng, "mc.f1", cf, cc, 3, 1);
        s.init_conv(rng, "mc.f2", cc, cc, 3, 1);
        s.init_conv(rng, "mc.f3", cc, cc, 3, 1);
        for k in 1..=3 {
            s.init_conv(rng, &format!("mc.r{k}"), cc, cc, 3, 1);
        }
        s.init_conv(rng, "ctx.e0", 3 + cc, cc, 3, 1);
        s.init_conv(rng, "ctx.e1", 2 * cc, cc, 3, 1);
        s.init_conv(rng, "ctx.e2", 2 * cc, cc, 3, 1);
        s.init_conv(rng, "ctx.e3", cc, c.latent_channels, 3, 1);
        s.init_deconv(rng, "ctx.d0", c.latent_channels, cc, 4);
        s.init_deconv(rng, "ctx.d1", cc, cc, 4);
        s.init_deconv(rng, "ctx.d2", 2 * cc, cc, 4);
        s.init_deconv(rng, "ctx.d3", 2 * cc, cc, 4);
        s.init_conv(rng, "ctx.d4", 2 * cc, cf, 3, 1);
        s.init_conv(rng, "rec.0", cf, cf, 3, 1);
        s.init_conv(rng, "rec.1", cf, 3, 3, 1);
        s.init_conv(rng, "adapt.0", 3, cf, 3, 1);
        self.mv_em.init(&mut s, rng);
        self.ctx_em.init(&mut s, rng);
        self.intra.init(&mut s, rng);
        s
    }

    /// Checks that `store` holds exactly the parameters this topology uses,
    /// with matching shapes.
    pub fn check_params(&self, store: &ParamStore<f32>) -> Result<()> {
        let reference = self.init_params::<f32>(0);
        for (name, t) in reference.iter() {
            match store.try_get(name) {
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Config(format!("parameter {name}: shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                Some(p) if !p.is_finite() => return Err(Error::Config(format!("parameter {name} is not finite"))),
                Some(_) => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        Ok(())
    }

    fn fer_pair<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tag: &str,
        stride: usize,
        x: [Var; 2],
    ) -> Result<[Var; 2]> {
        if !self.cfg.fer || !self.cfg.fer_strides.contains(&stride) {
            return Ok(x);
        }
        let (l, r) = fer::fer_var(tape, store, &format!("fer.{tag}{stride}"), x[0], x[1], &self.cfg.fer_block(stride))?;
        Ok([l, r])
    }

    fn each<T: Scalar>(
        tape: &mut Tape<T>,
        x: [Var; 2],
        mut f: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<[Var; 2]> {
        let l = f(tape, x[0])?;
        let r = f(tape, x[1])?;
        Ok([l, r])
    }

    /// Block-matching search followed by the learned residual refinement.
    /// Returns the refined flow and the search result it started from.
    pub fn motion_estimate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: [Var; 2],
        x_ref: Option<[Var; 2]>,
    ) -> Result<([Var; 2], [MotionField; 2])> {
        let x_ref = x_ref.ok_or_else(|| Error::State("motion estimation without a decoded buffer".into()))?;
        let mut fields = Vec::with_capacity(2);
        let mut out = [x[0]; 2];
        for v in 0..2 {
            let cur = tape.value(x[v]).cast::<f32>();
            let reference = tape.value(x_ref[v]).cast::<f32>();
            let field = block_match(&cur, &reference, self.cfg.me_levels, self.cfg.me_radius)?;
            let bm = tape.constant(field.mv.cast());
            let warped = tape.warp(x_ref[v], bm)?;
            let inp = tape.concat(&[x[v], warped, bm])?;
            let h = nn::conv(tape, store, "me.r0", inp, 1, 1)?;
            let h = nn::lrelu(tape, h);
            let d = nn::conv(tape, store, "me.r1", h, 1, 1)?;
            out[v] = tape.add(bm, d)?;
            fields.push(field);
        }
        let [a, b]: [MotionField; 2] = fields.try_into().expect("two views");
        Ok((out, [a, b]))
    }

    /// Motion analysis transform `mv → y_mv` for both views.
    pub fn motion_analysis<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mv: [Var; 2]) -> Result<[Var; 2]> {
        let mut h = mv;
        for i in 0..4 {
            let name = format!("mv.e{i}");
            h = Self::each(tape, h, |t, v| nn::conv(t, store, &name, v, 2, 1))?;
            if i < 3 {
                h = Self::each(tape, h, |t, v| Ok(nn::lrelu(t, v)))?;
                h = self.fer_pair(tape, store, "mv.e", 2 << i, h)?;
            }
        }
        Ok(h)
    }

    /// Motion synthesis transform `ŷ_mv → mv̂`.
    pub fn motion_synthesis<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y_hat: [Var; 2]) -> Result<[Var; 2]> {
        let mut h = y_hat;
        for i in 0..4 {
            let name = format!("mv.d{i}");
            h = Self::each(tape, h, |t, v| nn::deconv(t, store, &name, v, 2, 1, 0))?;
            if i < 3 {
                h = Self::each(tape, h, |t, v| Ok(nn::lrelu(t, v)))?;
                h = self.fer_pair(tape, store, "mv.d", 8 >> i, h)?;
            }
        }
        Ok(h)
    }

    /// Features at strides 1, 2, 4 extracted from `F_{t-1}`, before warping.
    pub fn context_pyramid<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feat: Var) -> Result<[Var; 3]> {
        let f1 = nn::conv(tape, store, "mc.f1", feat, 1, 1)?;
        let a = nn::lrelu(tape, f1);
        let f2 = nn::conv(tape, store, "mc.f2", a, 2, 1)?;
        let b = nn::lrelu(tape, f2);
        let f3 = nn::conv(tape, store, "mc.f3", b, 2, 1)?;
        Ok([f1, f2, f3])
    }

    /// Warps each pyramid level with the flow pooled and scaled to its stride.
    pub fn warp_pyramid<T: Scalar>(tape: &mut Tape<T>, levels: [Var; 3], mv: Var) -> Result<[Var; 3]> {
        let mut flow = mv;
        let mut out = levels;
        for (k, slot) in out.iter_mut().enumerate() {
            if k > 0 {
                let pooled = tape.avg_pool2(flow)?;
                flow = tape.scale(pooled, T::from_f64_lossy(0.5));
            }
            *slot = tape.warp(*slot, flow)?;
        }
        Ok(out)
    }

    /// Multi-scale temporal context `Ctx_{1..3}` of one view.
    pub fn motion_compensate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feat: Var, mv_hat: Var) -> Result<[Var; 3]> {
        let levels = self.context_pyramid(tape, store, feat)?;
        let warped = Self::warp_pyramid(tape, levels, mv_hat)?;
        let mut ctx = warped;
        for (k, slot) in ctx.iter_mut().enumerate() {
            let a = nn::lrelu(tape, warped[k]);
            let r = nn::conv(tape, store, &format!("mc.r{}", k + 1), a, 1, 1)?;
            *slot = tape.add(warped[k], r)?;
        }
        Ok(ctx)
    }

    /// Conditional analysis `(x_t, Ctx) → y`.
    pub fn context_analysis<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: [Var; 2],
        ctx: &[[Var; 3]; 2],
    ) -> Result<[Var; 2]> {
        let mut h = [x[0]; 2];
        for v in 0..2 {
            let a = tape.concat(&[x[v], ctx[v][0]])?;
            let a = nn::conv(tape, store, "ctx.e0", a, 2, 1)?;
            h[v] = nn::lrelu(tape, a);
        }
        let mut h = self.fer_pair(tape, store, "ctx.e", 2, h)?;
        for (k, stride) in [(1usize, 4usize), (2, 8)] {
            for v in 0..2 {
                let a = tape.concat(&[h[v], ctx[v][k]])?;
                let a = nn::conv(tape, store, &format!("ctx.e{k}"), a, 2, 1)?;
                h[v] = nn::lrelu(tape, a);
            }
            h = self.fer_pair(tape, store, "ctx.e", stride, h)?;
        }
        Self::each(tape, h, |t, v| nn::conv(t, store, "ctx.e3", v, 2, 1))
    }

    /// Conditional synthesis `(ŷ, Ctx) → F_t`.
    pub fn context_synthesis<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y_hat: [Var; 2],
        ctx: &[[Var; 3]; 2],
    ) -> Result<[Var; 2]> {
        let h = Self::each(tape, y_hat, |t, v| {
            let a = nn::deconv(t, store, "ctx.d0", v, 2, 1, 0)?;
            Ok(nn::lrelu(t, a))
        })?;
        let h = self.fer_pair(tape, store, "ctx.d", 8, h)?;
        let h = Self::each(tape, h, |t, v| {
            let a = nn::deconv(t, store, "ctx.d1", v, 2, 1, 0)?;
            Ok(nn::lrelu(t, a))
        })?;
        let mut h = self.fer_pair(tape, store, "ctx.d", 4, h)?;
        for v in 0..2 {
            let a = tape.concat(&[h[v], ctx[v][2]])?;
            let a = nn::deconv(tape, store, "ctx.d2", a, 2, 1, 0)?;
            h[v] = nn::lrelu(tape, a);
        }
        let mut h = self.fer_pair(tape, store, "ctx.d", 2, h)?;
        for v in 0..2 {
            let a = tape.concat(&[h[v], ctx[v][1]])?;
            let a = nn::deconv(tape, store, "ctx.d3", a, 2, 1, 0)?;
            let a = nn::lrelu(tape, a);
            let a = tape.concat(&[a, ctx[v][0]])?;
            h[v] = nn::conv(tape, store, "ctx.d4", a, 1, 1)?;
        }
        Ok(h)
    }

    /// Frame reconstruction `F_t → x̂_t`, clamped to `[0, 1]`.
    pub fn reconstruct<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feat: Var) -> Result<Var> {
        let a = nn::lrelu(tape, feat);
        let a = nn::conv(tape, store, "rec.0", a, 1, 1)?;
        let a = nn::lrelu(tape, a);
        let a = nn::conv(tape, store, "rec.1", a, 1, 1)?;
        Ok(tape.bound(a, T::zero(), T::one()))
    }

    /// Features that seed the buffer after an intra-coded frame.
    pub fn intra_features<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x_hat: Var) -> Result<Var> {
        nn::conv(tape, store, "adapt.0", x_hat, 1, 1)
    }

    fn check_frame(&self, tape_shape: &[usize]) -> Result<()> {
        let align = crate::config::FRAME_ALIGN;
        if tape_shape.len() != 3 || tape_shape[0] != 3 || tape_shape[1] % align != 0 || tape_shape[2] % align != 0 {
            return Err(shape(format!("P-frame input {tape_shape:?} must be [3, H, W] with H, W multiples of {align}")));
        }
        Ok(())
    }

    /// Full training-mode P-frame with straight-through quantization.
    pub fn train_pframe<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: [Var; 2],
        prev_x_hat: [Var; 2],
        prev_feat: [Var; 2],
    ) -> Result<PFrameTrain> {
        self.check_frame(tape.shape(x[0]))?;
        let (mv, _) = self.motion_estimate(tape, store, x, Some(prev_x_hat))?;
        let y_mv = self.motion_analysis(tape, store, mv)?;
        let mo = self.mv_em.train_forward(tape, store, y_mv, None)?;
        let mv_hat = self.motion_synthesis(tape, store, mo.y_hat)?;
        let ctx = [
            self.motion_compensate(tape, store, prev_feat[0], mv_hat[0])?,
            self.motion_compensate(tape, store, prev_feat[1], mv_hat[1])?,
        ];
        let y = self.context_analysis(tape, store, x, &ctx)?;
        let co = self.ctx_em.train_forward(tape, store, y, Some(ctx))?;
        let feat = self.context_synthesis(tape, store, co.y_hat, &ctx)?;
        let x_hat = Self::each(tape, feat, |t, f| self.reconstruct(t, store, f))?;
        let bits = [0, 1].map(|v| StreamBits {
            motion_y: mo.bits_y[v],
            motion_z: mo.bits_z[v],
            context_y: co.bits_y[v],
            context_z: co.bits_z[v],
        });
        Ok(PFrameTrain { x_hat, feat, bits })
    }

    /// Encodes one P-frame. All decoder-side values are recomputed from the
    /// quantized latents exactly as [`Self::decode_pframe`] does.
    pub fn encode_pframe(
        &self,
        store: &ParamStore<f32>,
        x: [&Tensor<f32>; 2],
        buffer: Option<&DecodedBuffer>,
        coder: &dyn SymbolCoder,
    ) -> Result<PFrameCode> {
        let buffer = buffer.ok_or_else(|| Error::State("P-frame without a decoded buffer".into()))?;
        let mut tape = Tape::<f32>::inference();
        let xv = [tape.constant(x[0].clone()), tape.constant(x[1].clone())];
        self.check_frame(tape.shape(xv[0]))?;
        let prev = [tape.constant(buffer.x_hat[0].clone()), tape.constant(buffer.x_hat[1].clone())];
        let (mv, _) = self.motion_estimate(&mut tape, store, xv, Some(prev))?;
        let y_mv = self.motion_analysis(&mut tape, store, mv)?;
        let (menc, mv_y_hat) = self.mv_em.encode(&mut tape, store, y_mv, None, coder)?;
        let (cenc, rest) = self.finish_encode(&mut tape, store, xv, mv_y_hat, buffer, coder)?;
        let seg = |m: &EmEncoding, c: &EmEncoding, v: usize| {
            [m.hyper_segments[v].clone(), m.slice_segments[v].clone(), c.hyper_segments[v].clone(), c.slice_segments[v].clone()]
        };
        Ok(PFrameCode {
            segments: [seg(&menc, &cenc, 0), seg(&menc, &cenc, 1)],
            buffer: rest,
            latents: FrameLatents { motion: menc.y_hat.clone(), context: cenc.y_hat.clone() },
            bits_estimate: menc.total_bits_estimate() + cenc.total_bits_estimate(),
        })
    }

    fn finish_encode(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        x: [Var; 2],
        mv_y_hat: [Var; 2],
        buffer: &DecodedBuffer,
        coder: &dyn SymbolCoder,
    ) -> Result<(EmEncoding, DecodedBuffer)> {
        let ctx = self.decoder_context(tape, store, mv_y_hat, buffer)?;
        let y = self.context_analysis(tape, store, x, &ctx)?;
        let (cenc, y_hat) = self.ctx_em.encode(tape, store, y, Some(ctx), coder)?;
        let out = self.decoder_output(tape, store, y_hat, &ctx)?;
        Ok((cenc, out))
    }

    fn decoder_context(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        mv_y_hat: [Var; 2],
        buffer: &DecodedBuffer,
    ) -> Result<[[Var; 3]; 2]> {
        let mv_hat = self.motion_synthesis(tape, store, mv_y_hat)?;
        let mut ctx = Vec::with_capacity(2);
        for v in 0..2 {
            let f = tape.constant(buffer.feat[v].clone());
            ctx.push(self.motion_compensate(tape, store, f, mv_hat[v])?);
        }
        Ok([ctx[0], ctx[1]])
    }

    fn decoder_output(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, y_hat: [Var; 2], ctx: &[[Var; 3]; 2]) -> Result<DecodedBuffer> {
        let feat = self.context_synthesis(tape, store, y_hat, ctx)?;
        let x_hat = Self::each(tape, feat, |t, f| self.reconstruct(t, store, f))?;
        let (fl, fr) = pair(feat.map(|v| tape.value(v).clone()));
        let (xl, xr) = pair(x_hat.map(|v| tape.value(v).clone()));
        Ok(DecodedBuffer { x_hat: [xl, xr], feat: [fl, fr] })
    }

    /// Decodes one P-frame from its eight segments.
    pub fn decode_pframe(
        &self,
        store: &ParamStore<f32>,
        segments: &[Vec<u8>],
        buffer: Option<&DecodedBuffer>,
        coder: &dyn SymbolCoder,
    ) -> Result<(DecodedBuffer, FrameLatents)> {
        let buffer = buffer.ok_or_else(|| Error::State("P-frame without a decoded buffer".into()))?;
        if segments.len() != 2 * P_SEGMENTS_PER_VIEW {
            return Err(Error::Decode(format!("P-frame needs {} segments, got {}", 2 * P_SEGMENTS_PER_VIEW, segments.len())));
        }
        let (_, h, w) = buffer.x_hat[0].chw();
        let lh = (h / crate::config::LATENT_STRIDE, w / crate::config::LATENT_STRIDE);
        let s = |v: usize, k: usize| segments[v * P_SEGMENTS_PER_VIEW + k].as_slice();
        let mut tape = Tape::<f32>::inference();
        let mv_y_hat = self.mv_em.decode(&mut tape, store, lh, [s(0, 0), s(1, 0)], [s(0, 1), s(1, 1)], None, coder)?;
        let ctx = self.decoder_context(&mut tape, store, mv_y_hat, buffer)?;
        let y_hat = self.ctx_em.decode(&mut tape, store, lh, [s(0, 2), s(1, 2)], [s(0, 3), s(1, 3)], Some(ctx), coder)?;
        let out = self.decoder_output(&mut tape, store, y_hat, &ctx)?;
        let latents = FrameLatents {
            motion: [tape.value(mv_y_hat[0]).clone(), tape.value(mv_y_hat[1]).clone()],
            context: [tape.value(y_hat[0]).clone(), tape.value(y_hat[1]).clone()],
        };
        Ok((out, latents))
    }

    /// Buffer after an intra-coded frame.
    pub fn intra_buffer(&self, store: &ParamStore<f32>, x_hat: [Tensor<f32>; 2]) -> Result<DecodedBuffer> {
        let mut tape = Tape::<f32>::inference();
        let mut feat = Vec::with_capacity(2);
        for x in &x_hat {
            if x.rank() != 3 || x.shape()[0] != 3 {
                return Err(invalid(format!("intra reconstruction {:?}", x.shape())));
            }
            let v = tape.constant(x.clone());
            let f = self.intra_features(&mut tape, store, v)?;
            feat.push(tape.value(f).clone());
        }
        let [fl, fr]: [Tensor<f32>; 2] = feat.try_into().expect("two views");
        Ok(DecodedBuffer { x_hat, feat: [fl, fr] })
    }
}
