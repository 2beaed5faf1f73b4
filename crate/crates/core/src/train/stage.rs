//! Staged optimization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::codec::frame::{crop, StereoFrame};
use crate::codec::model::StereoCodec;
use crate::config::IntraKind;
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, ParamMask, ParamStore};
use crate::tensor::Tensor;

use super::loss::{rd_loss_var, RdLossBreakdown};
use super::synth::{synth_clip, SynthConfig};

/// Iteration budgets of stages 1 to 4.
pub const STAGE_ITERATIONS: [usize; 4] = [2000, 1000, 200, 1000];
/// Learning rate of stage 1.
pub const PRETRAIN_LR: f64 = 1e-4;
/// Learning rate of stages 2 to 4.
pub const FINETUNE_LR: f64 = 1e-5;
/// Prefix shared by every feature enhancement parameter.
pub const FER_PREFIX: &str = "fer.";

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub mask: ParamMask,
    pub iterations: usize,
    pub lr: f64,
    /// Feature enhancement blocks active.
    pub fer: bool,
    /// Cross-view entropy priors active.
    pub cross_view: bool,
}

impl StageConfig {
    /// Stage `stage` with the given budget.
    ///
    /// 1: single-view pretraining without enhancement blocks or cross-view
    /// priors. 2: cross-view priors added. 3: enhancement blocks added and
    /// trained alone. 4: everything.
    pub fn new(stage: u8, iterations: usize, lr: f64) -> Result<Self> {
        let fer_only = || vec![FER_PREFIX.to_string()];
        let (mask, fer, cross_view) = match stage {
            1 => (ParamMask::AllExcept(fer_only()), false, false),
            2 => (ParamMask::AllExcept(fer_only()), false, true),
            3 => (ParamMask::Only(fer_only()), true, true),
            4 => (ParamMask::All, true, true),
            _ => return Err(invalid(format!("stage must be 1 to 4, got {stage}"))),
        };
        if !(lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(StageConfig { stage, mask, iterations, lr, fer, cross_view })
    }

    /// Default budget and learning rate of `stage`.
    pub fn schedule(stage: u8) -> Result<Self> {
        let idx = usize::from(stage).checked_sub(1).filter(|&i| i < 4).ok_or_else(|| invalid(format!("no stage {stage}")))?;
        Self::new(stage, STAGE_ITERATIONS[idx], if stage == 1 { PRETRAIN_LR } else { FINETUNE_LR })
    }
}

/// Where training clips come from.
#[derive(Clone, Debug)]
pub enum ClipSource {
    Synthetic(SynthConfig),
    /// Random crops of consecutive frames from a user-supplied sequence.
    Frames { frames: Vec<StereoFrame>, crop: (usize, usize), clip_len: usize },
}

impl ClipSource {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<StereoFrame>> {
        match self {
            ClipSource::Synthetic(cfg) => Ok(synth_clip(cfg, rng)?.frames),
            ClipSource::Frames { frames, crop: (ch, cw), clip_len } => {
                let (h, w) = frames.first().ok_or_else(|| invalid("no training frames"))?.dims();
                if *clip_len == 0 || frames.len() < *clip_len || *ch > h || *cw > w {
                    return Err(invalid(format!("cannot cut {clip_len} frames of {ch}x{cw} from {} frames of {h}x{w}", frames.len())));
                }
                let t0 = rng.gen_range(0..=frames.len() - clip_len);
                let (y0, x0) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
                frames[t0..t0 + clip_len]
                    .iter()
                    .enumerate()
                    .map(|(t, f)| {
                        let cut = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
                            let shifted = offset(x, y0, x0)?;
                            crop(&shifted, *ch, *cw)
                        };
                        StereoFrame::new(cut(&f.left)?, cut(&f.right)?, t)
                    })
                    .collect()
            }
        }
    }
}

fn offset(x: &Tensor<f32>, y0: usize, x0: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.chw();
    let (nh, nw) = (h - y0, w - x0);
    let d = x.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ci in 0..c {
        for y in y0..h {
            out.extend_from_slice(&d[ci * h * w + y * w + x0..ci * h * w + (y + 1) * w]);
        }
    }
    Tensor::from_vec(&[c, nh, nw], out)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub lambda: f64,
    /// Clips per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub source: ClipSource,
}

/// Loss of one clip: the intra frame plus every P-frame, averaged per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipLoss {
    pub total: f64,
    pub intra: f64,
    pub pframes: Vec<RdLossBreakdown>,
}

impl ClipLoss {
    /// Mean P-frame loss.
    pub fn pframe_mean(&self) -> f64 {
        self.pframes.iter().map(|p| p.total).sum::<f64>() / self.pframes.len().max(1) as f64
    }

    /// Mean P-frame rate in bits per pixel and mean P-frame distortion.
    pub fn pframe_rate_distortion(&self) -> (f64, f64) {
        let n = (2 * self.pframes.len()).max(1) as f64;
        let r = self.pframes.iter().map(|p| p.rate(0) + p.rate(1)).sum::<f64>() / n;
        let d = self.pframes.iter().map(|p| p.distortion[0] + p.distortion[1]).sum::<f64>() / n;
        (r, d)
    }
}

/// Builds the clip loss on `tape`. Frames must already be aligned to the
/// autoencoder stride.
pub fn clip_loss(
    tape: &mut Tape<f32>,
    codec: &StereoCodec,
    store: &ParamStore<f32>,
    clip: &[StereoFrame],
    lambda: f64,
) -> Result<(Var, ClipLoss)> {
    let first = clip.first().ok_or_else(|| invalid("empty clip"))?;
    let (h, w) = first.dims();
    let pixels = (h * w) as f32;
    let x0 = [tape.constant(first.left.clone()), tape.constant(first.right.clone())];
    let mut terms = Vec::new();
    let mut prev_x = x0;
    let mut prev_f = x0;
    for v in 0..2 {
        let (x_hat, bits) = codec.intra.train_forward(tape, store, x0[v])?;
        if codec.intra.kind == IntraKind::Factorized {
            let d = tape.mse(x0[v], x_hat)?;
            let d = tape.scale(d, lambda as f32);
            let r = tape.scale(bits, 1.0 / pixels);
            terms.push(tape.add(d, r)?);
        }
        prev_x[v] = x_hat;
        prev_f[v] = codec.intra_features(tape, store, x_hat)?;
    }
    let intra = match terms.as_slice() {
        [a, b] => {
            let s = tape.add(*a, *b)?;
            tape.value(s).data()[0] as f64
        }
        _ => 0.0,
    };
    let mut pframes = Vec::with_capacity(clip.len() - 1);
    for f in &clip[1..] {
        let x = [tape.constant(f.left.clone()), tape.constant(f.right.clone())];
        let out = codec.train_pframe(tape, store, x, prev_x, prev_f)?;
        let (l, breakdown) = rd_loss_var(tape, x, out.x_hat, &out.bits, lambda)?;
        terms.push(l);
        pframes.push(breakdown);
        prev_x = out.x_hat;
        prev_f = out.feat;
    }
    let mut total = *terms.first().ok_or_else(|| invalid("nothing to optimize: passthrough intra and no P-frames"))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / clip.len() as f32);
    let loss = ClipLoss { total: tape.value(total).data()[0] as f64, intra, pframes };
    Ok((total, loss))
}

/// Gradients of the clip loss for every trainable parameter that receives one.
pub fn clip_gradients(
    codec: &StereoCodec,
    store: &ParamStore<f32>,
    clip: &[StereoFrame],
    lambda: f64,
) -> Result<(BTreeMap<String, Tensor<f32>>, ClipLoss)> {
    let mut tape = Tape::<f32>::new();
    let (total, loss) = clip_loss(&mut tape, codec, store, clip, lambda)?;
    let grads = tape.backward(total);
    Ok((tape.param_grads(&grads), loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    /// Mean clip loss per iteration.
    pub losses: Vec<f64>,
}

fn diagnostics(loss: &ClipLoss) -> String {
    let mut s = format!("intra {:.4e}", loss.intra);
    for (i, p) in loss.pframes.iter().enumerate() {
        s.push_str(&format!("; P{}: d {:?} bits {:?}", i + 1, p.distortion, p.rate_bits));
    }
    s
}

/// Optimizes `store` for one stage. Only parameters inside the stage mask
/// change; the store's mask is restored to [`ParamMask::All`] afterwards.
pub fn run_stage(
    codec: &StereoCodec,
    store: &mut ParamStore<f32>,
    stage: &StageConfig,
    opts: &TrainOptions,
    mut progress: Option<&mut dyn FnMut(usize, &ClipLoss)>,
) -> Result<StageReport> {
    if opts.batch == 0 {
        return Err(invalid("batch must be at least 1"));
    }
    let model = codec.with_switches(stage.fer, stage.cross_view)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(stage.lr);
    store.set_mask(stage.mask.clone());
    let mut losses = Vec::with_capacity(stage.iterations);
    let result = (|| {
        for it in 0..stage.iterations {
            let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut mean = 0.0;
            for _ in 0..opts.batch {
                let clip: Vec<StereoFrame> = opts.source.sample(&mut rng)?.iter().map(StereoFrame::padded).collect();
                let (grads, loss) = clip_gradients(&model, store, &clip, opts.lambda)?;
                let finite = loss.total.is_finite() && grads.values().all(Tensor::is_finite);
                if !finite {
                    return Err(Error::NonFiniteLoss { iteration: it, diagnostics: diagnostics(&loss) });
                }
                mean += loss.total / opts.batch as f64;
                for (k, g) in grads {
                    match sum.get_mut(&k) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(k, g);
                        }
                    }
                }
                if let Some(cb) = progress.as_mut() {
                    cb(it, &loss);
                }
            }
            if opts.batch > 1 {
                let s = 1.0 / opts.batch as f32;
                for g in sum.values_mut() {
                    *g = g.map(|v| v * s);
                }
            }
            adam.step(store, &sum);
            losses.push(mean);
        }
        Ok(())
    })();
    store.set_mask(ParamMask::All);
    result?;
    Ok(StageReport { stage: stage.stage, losses })
}

/// Relative drop between the means of the first and last `window` entries.
pub fn smoothed_drop(losses: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, losses.len().max(1));
    if losses.len() < 2 * w {
        return 0.0;
    }
    let head = losses[..w].iter().sum::<f64>() / w as f64;
    let tail = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (head - tail) / head
}

/// Tracks stage order across calls: a stage may be repeated but not skipped.
pub struct Trainer {
    pub codec: StereoCodec,
    pub store: ParamStore<f32>,
    pub completed: u8,
}

impl Trainer {
    pub fn new(codec: StereoCodec, store: ParamStore<f32>, completed: u8) -> Self {
        Trainer { codec, store, completed }
    }

    pub fn run(&mut self, stage: &StageConfig, opts: &TrainOptions, progress: Option<&mut dyn FnMut(usize, &ClipLoss)>) -> Result<StageReport> {
        if stage.stage > self.completed + 1 {
            return Err(Error::State(format!("stage {} requested before stage {}", stage.stage, self.completed + 1)));
        }
        let report = run_stage(&self.codec, &mut self.store, stage, opts, progress)?;
        self.completed = self.completed.max(stage.stage);
        Ok(report)
    }
}

/// Mean clip loss of `clips` without updating anything.
pub fn evaluate(codec: &StereoCodec, store: &ParamStore<f32>, clips: &[Vec<StereoFrame>], lambda: f64) -> Result<Vec<ClipLoss>> {
    clips
        .iter()
        .map(|c| {
            let padded: Vec<StereoFrame> = c.iter().map(StereoFrame::padded).collect();
            let mut tape = Tape::<f32>::inference();
            clip_loss(&mut tape, codec, store, &padded, lambda).map(|(_, l)| l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;

    fn setup() -> (StereoCodec, ParamStore<f32>, TrainOptions) {
        let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
        let store = codec.init_params(1);
        let opts = TrainOptions { lambda: 256.0, batch: 1, seed: 3, source: ClipSource::Synthetic(SynthConfig::default()) };
        (codec, store, opts)
    }

    #[test]
    fn stage_three_touches_only_enhancement_blocks() {
        let (codec, mut store, opts) = setup();
        let before = store.clone();
        let stage = StageConfig::new(3, 2, 1e-3).unwrap();
        run_stage(&codec, &mut store, &stage, &opts, None).unwrap();
        let mut moved = 0;
        for (name, t) in before.iter() {
            if name.starts_with(FER_PREFIX) {
                moved += usize::from(store.get(name) != t);
            } else {
                assert_eq!(store.get(name), t, "{name} changed");
            }
        }
        assert!(moved > 0);
        // Frozen parameters get no gradient at all.
        let model = codec.with_switches(true, true).unwrap();
        store.set_mask(stage.mask.clone());
        let clip: Vec<StereoFrame> = opts.source.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (grads, _) = clip_gradients(&model, &store, &clip, 256.0).unwrap();
        assert!(!grads.is_empty());
        assert!(grads.keys().all(|k| k.starts_with(FER_PREFIX)));
    }

    #[test]
    fn training_is_deterministic() {
        let (codec, store, opts) = setup();
        let stage = StageConfig::new(4, 2, 1e-3).unwrap();
        let mut a = store.clone();
        let mut b = store;
        let ra = run_stage(&codec, &mut a, &stage, &opts, None).unwrap();
        let rb = run_stage(&codec, &mut b, &stage, &opts, None).unwrap();
        for (x, y) in ra.losses.iter().zip(&rb.losses) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn stages_cannot_be_skipped() {
        let (codec, store, opts) = setup();
        let mut trainer = Trainer::new(codec, store, 0);
        let stage = StageConfig::new(2, 0, 1e-3).unwrap();
        assert!(matches!(trainer.run(&stage, &opts, None), Err(Error::State(_))));
        assert!(StageConfig::new(5, 1, 1e-3).is_err());
        assert_eq!(StageConfig::schedule(3).unwrap().iterations, 200);
        assert_eq!(StageConfig::schedule(2).unwrap().lr, 1e-5);
    }

    #[test]
    fn smoothed_drop_of_a_halving_curve() {
        let l = [4.0, 4.0, 3.0, 2.0, 2.0];
        assert_eq!(smoothed_drop(&l, 2), 0.5);
        assert_eq!(smoothed_drop(&l[..3], 2), 0.0);
    }
}
