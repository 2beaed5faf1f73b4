//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs with the Exp-Golomb bypass serializer only.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereocodec::bitio::BypassCoder;
use stereocodec::codec::{decode_gop_with, encode_gop, StereoCodec, StereoFrame};
use stereocodec::config::CodecConfig;
use stereocodec::em::{causality_fuzz, quantize_slice, EmConfig, EntropyModel, PROB_FLOOR, SIGMA_MIN};
use stereocodec::evalkit::{bd_rate, psnr_from_mse, psnr_rgb, yuv420_to_rgb_bt709, RdCurve, RdPoint, Yuv420};
use stereocodec::fer::{self, FerConfig, FerMode};
use stereocodec::hdc::{self, build_shift_volume, normalize_score, DisparityVolume, FeatureMap, ShiftSign, View};
use stereocodec::nn::{ParamMask, ParamStore};
use stereocodec::tensor::Tensor;
use stereocodec::train::gradcheck::{grad_check, random_tensor};
use stereocodec::train::stage::{evaluate, run_stage, smoothed_drop, ClipSource, StageConfig, TrainOptions};
use stereocodec::train::{synth_clip, SynthConfig};

type Outcome = (bool, String);

/// Learning rate for desk-scale training from random weights, and the
/// fine-tuning rate one decade below it.
const DESK_LR: f64 = 1e-3;
const DESK_FINETUNE_LR: f64 = 1e-4;
const LAMBDA: f64 = 256.0;

fn held_out_clips(sc: &SynthConfig, n: usize) -> Vec<Vec<StereoFrame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    (0..n).map(|_| synth_clip(sc, &mut rng).unwrap().frames).collect()
}

fn bitwise_eq(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn perturb(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, scale: f32) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn shift_volume_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    let mut mismatches = 0;
    for c in 1..=4 {
        for h in 1..=4 {
            for w in 1..=8 {
                let k = Array::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0f64..1.0));
                let fm = FeatureMap::new(k.clone(), View::Left, 1).unwrap();
                for d in 1..=w {
                    for sign in [ShiftSign::Plus, ShiftSign::Minus] {
                        let v = build_shift_volume(&fm, sign, d).unwrap();
                        cases += 1;
                        for p in 0..d {
                            for ci in 0..c {
                                for hi in 0..h {
                                    for x in 0..w as isize {
                                        // Plane p holds the map displaced by p + 1 pixels.
                                        let src = match sign {
                                            ShiftSign::Plus => x + p as isize + 1,
                                            ShiftSign::Minus => x - p as isize - 1,
                                        };
                                        let expect = if (0..w as isize).contains(&src) { k[[ci, hi, src as usize]] } else { 0.0 };
                                        if v.data[[p, ci, hi, x as usize]].to_bits() != expect.to_bits() {
                                            mismatches += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (mismatches == 0 && secs < 10.0, format!("{cases} volumes, {mismatches} mismatching entries, {secs:.2} s"))
}

fn normalization_identity() -> Outcome {
    let zero = DisparityVolume::new(ndarray::Array4::<f64>::zeros((1, 1, 1, 1))).unwrap();
    let at_zero = normalize_score(&zero).unwrap().data[[0, 0, 0, 0]];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1_000_000;
    let values = Array::from_shape_fn((1, 1, 1000, n / 1000), |(_, _, i, _)| {
        // Mix of moderate and extreme magnitudes.
        let scale = [1.0, 10.0, 100.0, 1e4][i % 4];
        rng.gen_range(-scale..scale)
    });
    let s = normalize_score(&DisparityVolume::new(values).unwrap()).unwrap();
    let inside = s.data.iter().filter(|&&v| v > 0.0 && v < 1.0).count();
    let ok = (at_zero - 0.6).abs() < 1e-12 && inside == n;
    (ok, format!("score(0) = {at_zero:.15}, {inside}/{n} outputs in (0,1)"))
}

fn quantizer_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let y: Vec<f64> = (0..n).map(|i| rng.gen_range(-1.0..1.0) * [1.0, 10.0, 1000.0][i % 3]).collect();
    let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let q = quantize_slice(&y, &mu);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for i in 0..n {
        let r = q[i] - mu[i];
        // Integer up to the rounding of the final addition and subtraction.
        let tol = 4.0 * f64::EPSILON * q[i].abs().max(mu[i].abs()).max(1.0);
        let frac = (r - r.round()).abs();
        worst = worst.max(frac);
        if frac > tol || (q[i] - y[i]).abs() > 0.5 + tol {
            bad += 1;
        }
    }
    let again = quantize_slice(&q, &mu);
    let idem = again.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits());
    (bad == 0 && idem, format!("{n} elements, {bad} violations, max |frac(ŷ-μ)| {worst:.1e}, idempotent {idem}"))
}

fn coding_order_causality() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for slices in [1usize, 2, 4] {
        let cfg = EmConfig {
            latent_channels: 8,
            slices,
            hyper_channels: 4,
            phi_channels: 4,
            prior_channels: 4,
            est_hidden: 8,
            d_feat: 3,
            context: None,
            fusion_channels: 4,
            sigma_min: SIGMA_MIN,
            cross_view: true,
            mode: FerMode::Full,
        };
        let em = EntropyModel::new("em", cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + slices as u64);
        em.init(&mut store, &mut rng);
        // Zero-initialised heads would make every output constant.
        perturb(&mut store, &mut rng, 0.3);
        let report = causality_fuzz(&em, &store, (4, 8), 100, &mut rng).unwrap();
        ok &= report.violations == 0 && report.checks == 100;
        detail.push(format!("N={slices}: {} violations in {} trials", report.violations, report.checks));
    }
    (ok, detail.join(", "))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut store = ParamStore::<f64>::new();
    hdc::init_aggregator(&mut store, &mut rng, "agg", 2, 2);
    let kl = random_tensor(&mut rng, &[2, 4, 4], 1.0);
    let kr = random_tensor(&mut rng, &[2, 4, 4], 1.0);
    let composite = grad_check(&store, &[kl.clone(), kr.clone()], 12, |t, s, v| {
        let vl = t.shift_volume(v[0], Some(ShiftSign::Plus), 2)?;
        let vr = t.shift_volume(v[1], Some(ShiftSign::Minus), 2)?;
        let f = hdc::score_var(t, vl, vr)?;
        hdc::aggregate_named(t, s, "agg", Some(f), vr)
    })
    .unwrap();

    let mut store = ParamStore::<f64>::new();
    fer::init_block(&mut store, &mut rng, "b", 2, 2, false);
    let cfg = FerConfig { s: 2, d_feat: 2, mode: FerMode::Full };
    let block = grad_check(&store, &[kl, kr], 8, |t, s, v| {
        let (l, r) = fer::fer_var(t, s, "b", v[0], v[1], &cfg)?;
        t.concat(&[l, r])
    })
    .unwrap();

    let y = random_tensor(&mut rng, &[2, 3, 3], 2.0);
    let mu = random_tensor(&mut rng, &[2, 3, 3], 0.4);
    let sigma = random_tensor(&mut rng, &[2, 3, 3], 0.5).map(|v| v + 1.0);
    let rate = grad_check(&ParamStore::new(), &[mu, sigma], 14, |t, _, v| {
        let yc = t.constant(y.clone());
        let d = t.sub(yc, v[0])?;
        t.gaussian_bits(d, v[1], PROB_FLOOR)
    })
    .unwrap();

    let secs = t0.elapsed().as_secs_f64();
    let errs = [composite.max_rel_err, block.max_rel_err, rate.max_rel_err];
    let ok = errs.iter().all(|&e| e < 1e-4) && secs < 60.0;
    (ok, format!("max rel err HDC {:.1e}, FER {:.1e}, rate {:.1e}; {secs:.1} s", errs[0], errs[1], errs[2]))
}

fn codec_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatched = 0;
    let clips = 100;
    for i in 0..clips {
        let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
        let mut store = codec.init_params(i);
        perturb(&mut store, &mut rng, 0.02);
        let sc = SynthConfig {
            height: rng.gen_range(20..=72),
            width: rng.gen_range(20..=80),
            frames: rng.gen_range(2..=4),
            ..SynthConfig::default()
        };
        let frames = synth_clip(&sc, &mut rng).unwrap().frames;
        let gop = rng.gen_range(1..=3);
        let enc = encode_gop(&codec, &store, &frames, gop, &BypassCoder).unwrap();
        let bytes = enc.container.to_bytes().unwrap();
        let container = stereocodec::codec::Container::from_bytes(&bytes).unwrap();
        let dec = decode_gop_with(&codec, &store, &container, &BypassCoder).unwrap();
        let frames_eq = enc.recon.iter().zip(&dec.frames).all(|(a, b)| bitwise_eq(&a.left, &b.left) && bitwise_eq(&a.right, &b.right));
        let latents_eq = enc.latents.iter().zip(&dec.latents).all(|(a, b)| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => (0..2).all(|v| bitwise_eq(&a.motion[v], &b.motion[v]) && bitwise_eq(&a.context[v], &b.context[v])),
            _ => false,
        });
        if !(frames_eq && latents_eq && dec.frames.len() == frames.len()) {
            mismatched += 1;
        }
    }
    (mismatched == 0, format!("{clips} random clips, {mismatched} with any differing reconstruction or latent bit"))
}

fn training_smoke() -> Outcome {
    let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
    let mut store = codec.init_params(0);
    let stage = StageConfig::new(4, 200, DESK_LR).unwrap();
    let opts = TrainOptions { lambda: LAMBDA, batch: 1, seed: 0, source: ClipSource::Synthetic(SynthConfig::default()) };
    let report = run_stage(&codec, &mut store, &stage, &opts, None).unwrap();
    let drop = smoothed_drop(&report.losses, 20);
    (drop >= 0.2, format!("200 stage-4 iterations: smoothed loss drop {:.1}% (first/last 20 iterations)", 100.0 * drop))
}

fn mean_pframe_loss(codec: &StereoCodec, store: &ParamStore<f32>, held: &[Vec<StereoFrame>]) -> f64 {
    let ev = evaluate(codec, store, held, LAMBDA).unwrap();
    ev.iter().map(|l| l.pframe_mean()).sum::<f64>() / ev.len() as f64
}

/// Both arms start from one backbone trained without FER (stages 1 and 2)
/// and then follow the same schedule on the same clip streams: stage 3 trains
/// only the FER blocks, so it is empty for the ablated model, and stage 4
/// fine-tunes everything.
fn fer_ablation() -> Outcome {
    let held = held_out_clips(&SynthConfig::default(), 16);
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let codec = StereoCodec::new(CodecConfig::tiny()).unwrap();
        let mut base = codec.init_params(100 + seed);
        let opts = |s: u64| TrainOptions { lambda: LAMBDA, batch: 1, seed: s, source: ClipSource::Synthetic(SynthConfig::default()) };
        run_stage(&codec, &mut base, &StageConfig::new(1, 300, DESK_LR).unwrap(), &opts(10 * seed), None).unwrap();
        run_stage(&codec, &mut base, &StageConfig::new(2, 300, DESK_LR).unwrap(), &opts(10 * seed + 1), None).unwrap();
        let mut loss = [0.0; 2];
        for (slot, fer) in loss.iter_mut().zip([true, false]) {
            let mut store = base.clone();
            if fer {
                run_stage(&codec, &mut store, &StageConfig::new(3, 200, DESK_FINETUNE_LR).unwrap(), &opts(10 * seed + 2), None).unwrap();
            }
            let mut last = StageConfig::new(4, 800, DESK_FINETUNE_LR).unwrap();
            last.fer = fer;
            run_stage(&codec, &mut store, &last, &opts(10 * seed + 3), None).unwrap();
            *slot = mean_pframe_loss(&codec.with_switches(fer, true).unwrap(), &store, &held);
        }
        if loss[1] > loss[0] {
            wins += 1;
        }
        detail.push(format!("{:.3}/{:.3}", loss[0], loss[1]));
    }
    (wins >= 4, format!("ablated worse in {wins}/5 seeds (full/ablated held-out P-frame loss: {})", detail.join(", ")))
}

/// A shared backbone is trained with cross-view priors off; a freshly drawn
/// entropy model is then trained alone for the same budget with cross-view
/// priors on and off. Transforms are frozen, so both arms share the
/// distortion. Clips are 128 px so latent maps are wide enough to align.
fn cross_view_gain() -> Outcome {
    let sc = SynthConfig { height: 128, width: 128, ..SynthConfig::default() };
    let held = held_out_clips(&sc, 16);
    let mut cfg = CodecConfig::tiny();
    cfg.fer = false;
    let codec = StereoCodec::new(cfg).unwrap();
    let mut base = codec.init_params(7);
    let opts = |s: u64| TrainOptions { lambda: LAMBDA, batch: 1, seed: s, source: ClipSource::Synthetic(sc.clone()) };
    let mut pre = StageConfig::new(4, 600, DESK_LR).unwrap();
    pre.fer = false;
    pre.cross_view = false;
    run_stage(&codec, &mut base, &pre, &opts(0), None).unwrap();
    // Both arms start from the same freshly drawn entropy model.
    let fresh = codec.init_params::<f32>(77);
    for (name, t) in fresh.iter().filter(|(n, _)| n.starts_with("em.")) {
        *base.get_mut(name).unwrap() = t.clone();
    }
    let mut rd = [(0.0, 0.0); 2];
    for (slot, cross_view) in rd.iter_mut().zip([true, false]) {
        let mut store = base.clone();
        let mut st = StageConfig::new(4, 1000, DESK_LR).unwrap();
        st.fer = false;
        st.cross_view = cross_view;
        st.mask = ParamMask::Only(vec!["em.".into()]);
        run_stage(&codec, &mut store, &st, &opts(1), None).unwrap();
        let ev = evaluate(&codec.with_switches(false, cross_view).unwrap(), &store, &held, LAMBDA).unwrap();
        let (r, d) = ev.iter().map(|l| l.pframe_rate_distortion()).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        *slot = (r / ev.len() as f64, d / ev.len() as f64);
    }
    let gain = 1.0 - rd[0].0 / rd[1].0;
    let d_rel = (rd[0].1 - rd[1].1).abs() / rd[1].1;
    let ok = gain >= 0.05 && d_rel <= 0.01;
    (
        ok,
        format!(
            "rate {:.4} vs {:.4} bpp ({:.1}% lower with cross-view priors), distortion {:.3e} vs {:.3e} ({:.2}% apart)",
            rd[0].0,
            rd[1].0,
            100.0 * gain,
            rd[0].1,
            rd[1].1,
            100.0 * d_rel
        ),
    )
}

/// Dense trapezoid integration of the true log-rate curves.
fn bd_oracle(anchor: &dyn Fn(f64) -> f64, test: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let p = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (test(p) - anchor(p));
    }
    ((acc * h) / (hi - lo)).exp_m1() * 100.0
}

fn bd_rate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let pairs = 200;
    for _ in 0..pairs {
        // ln R(P) = a + b (P - 30) + c (P - 30)^2, increasing in P on the range.
        let mut curve = || {
            let a = rng.gen_range(-3.0..-1.0);
            let b = rng.gen_range(0.15..0.3);
            let c = rng.gen_range(-0.004..0.004);
            move |p: f64| a + b * (p - 30.0) + c * (p - 30.0) * (p - 30.0)
        };
        let (fa, ft) = (curve(), curve());
        let sample = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize| {
            let pts = (0..n)
                .map(|i| {
                    let p = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                    RdPoint { bpp: f(p).exp(), psnr_db: p }
                })
                .collect();
            RdCurve::new(pts).unwrap()
        };
        let (la, ha) = (rng.gen_range(26.0..29.0), rng.gen_range(38.0..41.0));
        let (lt, ht) = (rng.gen_range(26.0..29.0), rng.gen_range(38.0..41.0));
        let ca = sample(&fa, la, ha, 6);
        let ct = sample(&ft, lt, ht, 6);
        let got = bd_rate(&ca, &ct).unwrap();
        let want = bd_oracle(&fa, &ft, la.max(lt), ha.min(ht));
        worst = worst.max((got - want).abs());
    }
    let c = RdCurve::new((1..=5).map(|i| RdPoint { bpp: 0.05 * i as f64, psnr_db: 30.0 + 1.7 * i as f64 }).collect()).unwrap();
    let same = bd_rate(&c, &c).unwrap();
    (worst < 0.1 && same == 0.0, format!("{pairs} analytic pairs, max |BD - oracle| {worst:.4} pp; identical curves {same}"))
}

fn metric_identities() -> Outcome {
    let p0 = psnr_from_mse(255.0 * 255.0);
    let p30 = psnr_from_mse(65.025);
    let full = psnr_rgb(&[0.0; 6], &[255.0; 6]).unwrap();
    let white = [235u8; 4].iter().chain(&[128u8; 2]).copied().collect::<Vec<_>>();
    let black = [16u8; 4].iter().chain(&[128u8; 2]).copied().collect::<Vec<_>>();
    let w = yuv420_to_rgb_bt709(&Yuv420::from_packed(&white, 2, 2).unwrap()).unwrap();
    let b = yuv420_to_rgb_bt709(&Yuv420::from_packed(&black, 2, 2).unwrap()).unwrap();
    let ok = p0 == 0.0 && full == 0.0 && (p30 - 30.0).abs() < 1e-12 && w.data.iter().all(|&v| v == 255) && b.data.iter().all(|&v| v == 0);
    (ok, format!("PSNR(MSE=255²) = {p0}, PSNR(MSE=65.025) = {p30:.12}, BT.709 white {:?}, black {:?}", w.pixel(0, 0), b.pixel(0, 0)))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("shift-volume oracle", shift_volume_oracle),
        ("normalization identity", normalization_identity),
        ("quantizer contract", quantizer_contract),
        ("coding-order causality", coding_order_causality),
        ("gradient checks", gradient_checks),
        ("encoder/decoder symmetry", codec_symmetry),
        ("training smoke", training_smoke),
        ("FER ablation", fer_ablation),
        ("cross-view gain", cross_view_gain),
        ("BD-rate oracle", bd_rate_oracle),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let all = criteria.into_iter().chain(std::iter::once(("metric identities", metric_identities as fn() -> Outcome)));
    for (name, check) in all {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(e) => (false, format!("panicked: {}", e.downcast_ref::<String>().cloned().unwrap_or_else(|| format!("{:?}", e.downcast_ref::<&str>())))),
        };
        println!("{} {name}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
