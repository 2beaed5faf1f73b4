//! Cross-view feature enhancement block.
//!
//! Both views are downsampled by a shared strided convolution, turned into
//! shift volumes, scored against each other with one shared attention map,
//! aggregated per direction, refined, upsampled and added back as a residual.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape, Result};
use crate::hdc::{self, FeatureMap, ShiftSign, View};
use crate::nn::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Full-resolution maximum disparity.
pub const FRAME_MAX_DISPARITY: usize = 192;

/// Ablation switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FerMode {
    #[default]
    Full,
    /// Attention map replaced by ones.
    NoAttention,
    /// A single unshifted plane.
    NoShift,
}

/// Shift planes for features at `stride` after an internal downsampling by `s`.
pub fn default_feature_disparity(stride: usize, s: usize) -> usize {
    FRAME_MAX_DISPARITY.div_ceil(stride * s * 2).max(1)
}

/// Kernel and padding of the down/up sampling pair for factor `s`.
fn sampling_geometry(s: usize) -> (usize, usize) {
    let pad = s / 2;
    (s + 2 * pad, pad)
}

/// Registers a block's parameters under `prefix`.
///
/// Refinement weights start at zero when `zero_refine` is set, which makes
/// the block an exact identity until training moves them.
pub fn init_block<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, channels: usize, s: usize, zero_refine: bool) {
    let (k, _) = sampling_geometry(s);
    store.init_conv(rng, &format!("{prefix}.down"), channels, channels, k, 1);
    store.init_deconv(rng, &format!("{prefix}.up"), channels, channels, k);
    store.remove(&format!("{prefix}.up.b"));
    for tag in ['l', 'r'] {
        hdc::init_aggregator(store, rng, &format!("{prefix}.agg_{tag}"), channels, channels);
        store.init_conv(rng, &format!("{prefix}.ref_{tag}"), channels, channels, 3, 1);
        if zero_refine {
            store.zero_prefix(&format!("{prefix}.ref_{tag}."));
        }
    }
}

/// Block configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FerConfig {
    /// Internal downsampling factor.
    pub s: usize,
    pub d_feat: usize,
    pub mode: FerMode,
}

impl FerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(invalid("downsample factor must be at least 1"));
        }
        if self.d_feat == 0 {
            return Err(invalid("feature disparity must be at least 1"));
        }
        Ok(())
    }
}

/// Runs the block registered under `prefix` on the tape.
pub fn fer_var<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    kl: Var,
    kr: Var,
    cfg: &FerConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let sl = tape.shape(kl).to_vec();
    if sl != tape.shape(kr) {
        return Err(shape(format!("view features {:?} vs {:?}", sl, tape.shape(kr))));
    }
    if sl.len() != 3 || sl[1] % cfg.s != 0 || sl[2] % cfg.s != 0 {
        return Err(shape(format!("features {sl:?} not divisible by factor {}", cfg.s)));
    }
    let (_, pad) = sampling_geometry(cfg.s);
    let dl = nn::conv(tape, store, &format!("{prefix}.down"), kl, cfg.s, pad)?;
    let dr = nn::conv(tape, store, &format!("{prefix}.down"), kr, cfg.s, pad)?;
    let (vl, vr) = match cfg.mode {
        FerMode::NoShift => (tape.shift_volume(dl, None, 1)?, tape.shift_volume(dr, None, 1)?),
        _ => (
            tape.shift_volume(dl, Some(View::Left.shift_sign()), cfg.d_feat)?,
            tape.shift_volume(dr, Some(View::Right.shift_sign()), cfg.d_feat)?,
        ),
    };
    let f_star = match cfg.mode {
        FerMode::NoAttention => None,
        _ => Some(hdc::score_var(tape, vl, vr)?),
    };
    let up_w = tape.param(store, &format!("{prefix}.up.w"));
    let mut out = [kl, kr];
    for (slot, (tag, other)) in out.iter_mut().zip([('l', vr), ('r', vl)]) {
        let agg = hdc::aggregate_named(tape, store, &format!("{prefix}.agg_{tag}"), f_star, other)?;
        let agg = nn::lrelu(tape, agg);
        let refined = nn::conv(tape, store, &format!("{prefix}.ref_{tag}"), agg, 1, 1)?;
        let up = tape.deconv2d(refined, up_w, None, cfg.s, pad, 0)?;
        *slot = tape.add(*slot, up)?;
    }
    Ok((out[0], out[1]))
}

/// Stand-alone block weights.
#[derive(Clone, Debug)]
pub struct FerParams<T = f32> {
    pub store: ParamStore<T>,
    pub channels: usize,
    pub s: usize,
}

/// Enhanced features for both views.
#[derive(Clone, Debug, PartialEq)]
pub struct FerOutput<T = f32> {
    pub k_new_l: FeatureMap<T>,
    pub k_new_r: FeatureMap<T>,
}

const STANDALONE: &str = "fer";

impl<T: Scalar> FerParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, s: usize, zero_refine: bool) -> Self {
        let mut store = ParamStore::new();
        init_block(&mut store, rng, STANDALONE, channels, s, zero_refine);
        FerParams { store, channels, s }
    }

    /// Copies the block registered under `prefix` out of a larger store.
    pub fn from_store(src: &ParamStore<T>, prefix: &str, s: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let head = format!("{prefix}.");
        for (name, t) in src.iter() {
            if let Some(rest) = name.strip_prefix(&head) {
                store.insert(format!("{STANDALONE}.{rest}"), t.clone());
            }
        }
        let down = store
            .try_get(&format!("{STANDALONE}.down.w"))
            .ok_or_else(|| invalid(format!("no block registered under {prefix}")))?;
        let channels = down.shape()[0];
        Ok(FerParams { store, channels, s })
    }

    /// Zeroes aggregator and refinement weights and biases.
    pub fn zero_residual(&mut self) {
        for tag in ['l', 'r'] {
            self.store.zero_prefix(&format!("{STANDALONE}.agg_{tag}."));
            self.store.zero_prefix(&format!("{STANDALONE}.ref_{tag}."));
        }
    }

    /// Exchanges the per-direction aggregator and refinement weights.
    pub fn swap_directions(&self) -> Self {
        let mut out = self.clone();
        for (name, t) in self.store.iter() {
            let swapped = name
                .replace("agg_l", "agg_#")
                .replace("agg_r", "agg_l")
                .replace("agg_#", "agg_r")
                .replace("ref_l", "ref_#")
                .replace("ref_r", "ref_l")
                .replace("ref_#", "ref_r");
            out.store.insert(swapped, t.clone());
        }
        out
    }
}

fn check_views<T: Scalar>(kl: &FeatureMap<T>, kr: &FeatureMap<T>) -> Result<()> {
    if kl.dim() != kr.dim() {
        return Err(shape(format!("view features {:?} vs {:?}", kl.dim(), kr.dim())));
    }
    if kl.view != View::Left || kr.view != View::Right {
        return Err(invalid("expected a left then a right feature map"));
    }
    Ok(())
}

/// Applies the block in the given mode.
pub fn fer_ablated_forward<T: Scalar>(
    kl: &FeatureMap<T>,
    kr: &FeatureMap<T>,
    params: &FerParams<T>,
    d_feat: usize,
    mode: FerMode,
) -> Result<FerOutput<T>> {
    check_views(kl, kr)?;
    let cfg = FerConfig { s: params.s, d_feat, mode };
    let mut tape = Tape::inference();
    let l = tape.constant(kl.to_tensor());
    let r = tape.constant(kr.to_tensor());
    let (ol, or) = fer_var(&mut tape, &params.store, STANDALONE, l, r, &cfg)?;
    let to_map = |t: &Tensor<T>, view, stride| -> Result<FeatureMap<T>> {
        let (c, h, w) = t.chw();
        FeatureMap::new(Array3::from_shape_vec((c, h, w), t.data().to_vec()).expect("dims match"), view, stride)
    };
    Ok(FerOutput {
        k_new_l: to_map(tape.value(ol), View::Left, kl.stride)?,
        k_new_r: to_map(tape.value(or), View::Right, kr.stride)?,
    })
}

/// Applies the full block.
pub fn fer_forward<T: Scalar>(kl: &FeatureMap<T>, kr: &FeatureMap<T>, params: &FerParams<T>, d_feat: usize) -> Result<FerOutput<T>> {
    fer_ablated_forward(kl, kr, params, d_feat, FerMode::Full)
}

/// Internal shift volumes of the block for inspection: `(V^L, V^R)`.
pub fn block_volumes<T: Scalar>(
    kl: &FeatureMap<T>,
    kr: &FeatureMap<T>,
    params: &FerParams<T>,
    d_feat: usize,
    mode: FerMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_views(kl, kr)?;
    let (_, pad) = sampling_geometry(params.s);
    let mut tape = Tape::inference();
    let mut vols = Vec::new();
    for (k, sign) in [(kl, ShiftSign::Plus), (kr, ShiftSign::Minus)] {
        let x = tape.constant(k.to_tensor());
        let d = nn::conv(&mut tape, &params.store, &format!("{STANDALONE}.down"), x, params.s, pad)?;
        let v = match mode {
            FerMode::NoShift => tape.shift_volume(d, None, 1)?,
            _ => tape.shift_volume(d, Some(sign), d_feat)?,
        };
        vols.push(tape.value(v).clone());
    }
    let vr = vols.pop().expect("two volumes");
    let vl = vols.pop().expect("two volumes");
    Ok((vl, vr))
}

/// Downsampled features as computed inside the block.
pub fn block_downsample<T: Scalar>(k: &FeatureMap<T>, params: &FerParams<T>) -> Result<Tensor<T>> {
    let (_, pad) = sampling_geometry(params.s);
    let mut tape = Tape::inference();
    let x = tape.constant(k.to_tensor());
    let d = nn::conv(&mut tape, &params.store, &format!("{STANDALONE}.down"), x, params.s, pad)?;
    Ok(tape.value(d).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::gradcheck::{grad_check, random_tensor};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};

    fn pair(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (FeatureMap<f32>, FeatureMap<f32>) {
        let mut gen = |v| FeatureMap::new(Array::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0f32..1.0)), v, 4).unwrap();
        (gen(View::Left), gen(View::Right))
    }

    #[test]
    fn default_disparity_follows_stride() {
        assert_eq!(default_feature_disparity(4, 2), 12);
        assert_eq!(default_feature_disparity(8, 2), 6);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = FerParams::<f32>::init(&mut rng, 4, 2, false);
        for name in p.store.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".b") {
                p.store.zero_prefix(&name);
            }
        }
        let z = FeatureMap::new(Array3::zeros((4, 8, 8)), View::Left, 4).unwrap();
        let zr = FeatureMap { view: View::Right, ..z.clone() };
        let out = fer_forward(&z, &zr, &p, 3).unwrap();
        assert!(out.k_new_l.data.iter().chain(out.k_new_r.data.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_is_identity_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = FerParams::<f32>::init(&mut rng, 4, 2, false);
        p.zero_residual();
        let (kl, kr) = pair(&mut rng, 4, 8, 8);
        for mode in [FerMode::Full, FerMode::NoAttention, FerMode::NoShift] {
            let out = fer_ablated_forward(&kl, &kr, &p, 3, mode).unwrap();
            assert_eq!(out.k_new_l.data, kl.data);
            assert_eq!(out.k_new_r.data, kr.data);
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FerParams::<f32>::init(&mut rng, 16, 2, false);
        let (kl, kr) = pair(&mut rng, 16, 8, 16);
        for mode in [FerMode::Full, FerMode::NoAttention, FerMode::NoShift] {
            let out = fer_ablated_forward(&kl, &kr, &p, 4, mode).unwrap();
            assert_eq!(out.k_new_l.dim(), (16, 8, 16));
            assert_eq!(out.k_new_r.dim(), (16, 8, 16));
        }
    }

    #[test]
    fn no_shift_volume_is_unshifted_downsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FerParams::<f32>::init(&mut rng, 3, 2, false);
        let (kl, kr) = pair(&mut rng, 3, 8, 8);
        let (vl, vr) = block_volumes(&kl, &kr, &p, 5, FerMode::NoShift).unwrap();
        assert_eq!(vl.shape(), &[1, 3, 4, 4]);
        assert_eq!(vl.data(), block_downsample(&kl, &p).unwrap().data());
        assert_eq!(vr.data(), block_downsample(&kr, &p).unwrap().data());
    }

    #[test]
    fn rejects_mismatched_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FerParams::<f32>::init(&mut rng, 3, 2, false);
        let (kl, _) = pair(&mut rng, 3, 8, 8);
        let (_, kr) = pair(&mut rng, 3, 8, 4);
        assert!(fer_forward(&kl, &kr, &p, 2).is_err());
        let (kl, kr) = pair(&mut rng, 3, 6, 6);
        assert!(fer_forward(&kl, &kl.clone(), &p, 2).is_err());
        assert!(fer_forward(&kl, &kr, &p, 0).is_err());
    }

    #[test]
    fn no_shift_swap_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = FerParams::<f32>::init(&mut rng, 4, 2, false);
        let q = p.swap_directions();
        let (kl, kr) = pair(&mut rng, 4, 8, 8);
        let a = fer_ablated_forward(&kl, &kr, &p, 3, FerMode::NoShift).unwrap();
        let sl = FeatureMap { view: View::Left, ..kr.clone() };
        let sr = FeatureMap { view: View::Right, ..kl.clone() };
        let b = fer_ablated_forward(&sl, &sr, &q, 3, FerMode::NoShift).unwrap();
        assert_eq!(a.k_new_l.data, b.k_new_r.data);
        assert_eq!(a.k_new_r.data, b.k_new_l.data);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        init_block(&mut store, &mut rng, "b", 2, 2, false);
        let kl = random_tensor(&mut rng, &[2, 4, 4], 1.0);
        let kr = random_tensor(&mut rng, &[2, 4, 4], 1.0);
        let cfg = FerConfig { s: 2, d_feat: 2, mode: FerMode::Full };
        let report = grad_check(&store, &[kl, kr], 8, |t, s, v| {
            let (l, r) = fer_var(t, s, "b", v[0], v[1], &cfg)?;
            t.concat(&[l, r])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
