//! Hybrid disparity compensation: horizontal shift volumes, cross-view
//! similarity scoring and attention-weighted aggregation.
//!
//! Plane `d` of a volume (0-based) holds the horizontal shift `d + 1`.
//! Samples shifted past the image border are zero.

use ndarray::{Array1, Array3, Array4};

use crate::autodiff::{attention_score, Tape, Var};
use crate::error::{invalid, shape, Result};
use crate::kernels::{self, PlaneShift};
use crate::nn::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::kernels::ShiftSign;

/// Stereo view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub const BOTH: [View; 2] = [View::Left, View::Right];

    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }

    pub fn index(self) -> usize {
        match self {
            View::Left => 0,
            View::Right => 1,
        }
    }

    /// Shift direction this view uses when building its disparity volume.
    pub fn shift_sign(self) -> ShiftSign {
        match self {
            View::Left => ShiftSign::Plus,
            View::Right => ShiftSign::Minus,
        }
    }

    pub fn tag(self) -> char {
        match self {
            View::Left => 'l',
            View::Right => 'r',
        }
    }
}

/// Per-view feature map `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Array3<T>,
    pub view: View,
    /// Spatial downsampling factor relative to the input frame.
    pub stride: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array3<T>, view: View, stride: usize) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("feature map dims must be positive, got {:?}", data.dim())));
        }
        if stride == 0 {
            return Err(invalid("feature map stride must be positive"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap { data, view, stride })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        array3_to_tensor(&self.data)
    }
}

/// Disparity volume `[D, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityVolume<T = f32> {
    pub data: Array4<T>,
}

impl<T: Scalar> DisparityVolume<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.dim().0 == 0 {
            return Err(invalid("disparity volume needs at least one plane"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(invalid("disparity volume contains non-finite values"));
        }
        Ok(DisparityVolume { data })
    }

    pub fn max_disparity(&self) -> usize {
        self.data.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// Sum of every entry of plane `d`.
    pub fn plane_mass(&self, d: usize) -> T {
        self.data.index_axis(ndarray::Axis(0), d).iter().copied().sum()
    }
}

/// Weights of the disparity-reducing 3-D convolution: a `1×3×3` kernel over
/// `(d, h, w)` applied to every plane and summed across planes.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams<T = f32> {
    /// `[C_out, C_in, 3, 3]`.
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> AggregatorParams<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        AggregatorParams {
            weight: Array4::zeros((c_out, c_in, 3, 3)),
            bias: Array1::zeros(c_out),
        }
    }

    /// Kernel that sums planes with unit weight per channel and zero bias.
    pub fn plane_sum(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels);
        for c in 0..channels {
            p.weight[[c, c, 1, 1]] = T::one();
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }
}

fn array3_to_tensor<T: Scalar>(a: &Array3<T>) -> Tensor<T> {
    let (c, h, w) = a.dim();
    Tensor::from_vec(&[c, h, w], a.iter().copied().collect()).expect("dims match")
}

fn array4_to_vec<T: Scalar>(a: &Array4<T>) -> Vec<T> {
    a.iter().copied().collect()
}

fn check_finite<T: Scalar>(it: impl IntoIterator<Item = T>, what: &str) -> Result<()> {
    if it.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} contains non-finite values")))
    }
}

/// Stacks `planes` horizontally shifted copies of `k`.
pub fn build_shift_volume<T: Scalar>(k: &FeatureMap<T>, sign: ShiftSign, planes: usize) -> Result<DisparityVolume<T>> {
    if planes < 1 {
        return Err(invalid("maximum disparity must be at least 1"));
    }
    check_finite(k.data.iter().copied(), "feature map")?;
    let (c, h, w) = k.dim();
    let src: Vec<T> = k.data.iter().copied().collect();
    let out = kernels::shift_volume_forward(&src, c, h, w, Some(sign), planes);
    Ok(DisparityVolume {
        data: Array4::from_shape_vec((planes, c, h, w), out).expect("dims match"),
    })
}

/// Elementwise product of two same-shaped volumes.
pub fn similarity_map<T: Scalar>(vl: &DisparityVolume<T>, vr: &DisparityVolume<T>) -> Result<DisparityVolume<T>> {
    if vl.dim() != vr.dim() {
        return Err(shape(format!("similarity volumes {:?} vs {:?}", vl.dim(), vr.dim())));
    }
    Ok(DisparityVolume { data: &vl.data * &vr.data })
}

/// `tanh(softplus(F))` elementwise.
pub fn normalize_score<T: Scalar>(f: &DisparityVolume<T>) -> Result<DisparityVolume<T>> {
    check_finite(f.data.iter().copied(), "similarity map")?;
    Ok(DisparityVolume { data: f.data.mapv(attention_score) })
}

/// Reduces `F* ⊙ V` over the disparity axis with the aggregator convolution.
pub fn aggregate<T: Scalar>(
    f_star: &DisparityVolume<T>,
    v: &DisparityVolume<T>,
    params: &AggregatorParams<T>,
) -> Result<FeatureMap<T>> {
    let (_, c, h, w) = v.dim();
    if f_star.dim() != v.dim() {
        return Err(shape(format!("aggregate volumes {:?} vs {:?}", f_star.dim(), v.dim())));
    }
    if params.in_channels() != c || params.weight.dim().2 != 3 || params.weight.dim().3 != 3 {
        return Err(shape(format!("aggregator weight {:?} for {c} channels", params.weight.dim())));
    }
    if params.bias.len() != params.out_channels() {
        return Err(shape("aggregator bias length"));
    }
    let mut tape = Tape::<T>::inference();
    let fs = tape.constant(Tensor::from_vec(&[f_star.dim().0, c, h, w], array4_to_vec(&f_star.data))?);
    let vv = tape.constant(Tensor::from_vec(&[v.dim().0, c, h, w], array4_to_vec(&v.data))?);
    let wt = tape.constant(Tensor::from_vec(&[params.out_channels(), c, 3, 3], array4_to_vec(&params.weight))?);
    let bt = tape.constant(Tensor::from_vec(&[params.out_channels()], params.bias.to_vec())?);
    let out = aggregate_var(&mut tape, fs, vv, wt, bt)?;
    let t = tape.value(out).clone();
    let (co, oh, ow) = t.chw();
    FeatureMap::new(
        Array3::from_shape_vec((co, oh, ow), t.into_data()).expect("dims match"),
        View::Left,
        1,
    )
}

/// Tape form of [`aggregate`]; the shared `1×3×3` kernel commutes with the
/// sum over planes, so the planes are summed before convolving.
pub fn aggregate_var<T: Scalar>(tape: &mut Tape<T>, f_star: Var, v: Var, weight: Var, bias: Var) -> Result<Var> {
    let weighted = tape.mul(f_star, v)?;
    let reduced = tape.sum_axis0(weighted);
    tape.conv2d(reduced, weight, Some(bias), 1, 1, 1)
}

/// Attention score between two volumes: `tanh(softplus(VL ⊙ VR))`.
pub fn score_var<T: Scalar>(tape: &mut Tape<T>, vl: Var, vr: Var) -> Result<Var> {
    let f = tape.mul(vl, vr)?;
    Ok(tape.score(f))
}

/// Registers aggregator parameters `name.w`, `name.b`.
pub fn init_aggregator<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) {
    store.init_conv(rng, name, c_in, c_out, 3, 1);
}

/// Aggregation with the parameters registered under `name`.
pub fn aggregate_named<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, f_star: Option<Var>, v: Var) -> Result<Var> {
    let reduced = match f_star {
        Some(f) => {
            let weighted = tape.mul(f, v)?;
            tape.sum_axis0(weighted)
        }
        None => tape.sum_axis0(v),
    };
    nn::conv(tape, store, name, reduced, 1, 1)
}

/// Shift volume on the tape; `sign = None` yields a single unshifted plane.
pub fn volume_var<T: Scalar>(tape: &mut Tape<T>, x: Var, sign: PlaneShift, planes: usize) -> Result<Var> {
    match sign {
        Some(_) => tape.shift_volume(x, sign, planes),
        None => tape.shift_volume(x, None, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap<f64> {
        FeatureMap::new(Array::from_shape_fn((c, h, w), |(c, h, w)| f(c, h, w)), View::Left, 1).unwrap()
    }

    #[test]
    fn plus_shift_zero_pads_right_edge() {
        let k = fmap(1, 1, 4, |_, _, _| 1.0);
        let v = build_shift_volume(&k, ShiftSign::Plus, 1).unwrap();
        assert_eq!(v.data.as_slice().unwrap(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn minus_shift_second_plane() {
        let k = fmap(1, 1, 4, |_, _, w| w as f64);
        let v = build_shift_volume(&k, ShiftSign::Minus, 2).unwrap();
        let plane: Vec<f64> = v.data.index_axis(ndarray::Axis(0), 1).iter().copied().collect();
        assert_eq!(plane, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn last_plane_empty_when_disparity_equals_width() {
        let k = fmap(2, 3, 5, |c, h, w| (c + h + w) as f64 + 1.0);
        for sign in [ShiftSign::Plus, ShiftSign::Minus] {
            let v = build_shift_volume(&k, sign, 5).unwrap();
            assert!(v.data.index_axis(ndarray::Axis(0), 4).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shift_volume_rejects_bad_arguments() {
        let k = fmap(1, 1, 4, |_, _, _| 1.0);
        assert!(build_shift_volume(&k, ShiftSign::Plus, 0).is_err());
        let mut bad = k.clone();
        bad.data[[0, 0, 1]] = f64::NAN;
        assert!(build_shift_volume(&bad, ShiftSign::Plus, 1).is_err());
        assert!(FeatureMap::new(Array3::<f64>::zeros((0, 1, 1)), View::Left, 1).is_err());
    }

    #[test]
    fn similarity_is_elementwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DisparityVolume::new(Array::from_shape_fn((2, 1, 2, 2), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let b = DisparityVolume::new(Array::from_shape_fn((2, 1, 2, 2), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let s = similarity_map(&a, &b).unwrap();
        let (av, bv, sv) = (a.data.as_slice().unwrap(), b.data.as_slice().unwrap(), s.data.as_slice().unwrap());
        for i in 0..8 {
            assert_eq!(sv[i], av[i] * bv[i]);
        }
        let ones = DisparityVolume::new(Array4::<f64>::ones((1, 1, 1, 3))).unwrap();
        assert!(similarity_map(&ones, &ones).unwrap().data.iter().all(|&v| v == 1.0));
        let zeros = DisparityVolume::new(Array4::<f64>::zeros((1, 1, 1, 3))).unwrap();
        assert!(similarity_map(&zeros, &a.clone()).is_err());
        assert!(similarity_map(&zeros, &ones).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_of_zero_is_three_fifths() {
        let f = DisparityVolume::new(Array4::<f64>::zeros((1, 1, 1, 1))).unwrap();
        let s = normalize_score(&f).unwrap();
        assert!((s.data[[0, 0, 0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn score_vanishes_for_large_negative() {
        let f = DisparityVolume::new(Array4::<f64>::from_elem((1, 1, 1, 1), -50.0)).unwrap();
        let s = normalize_score(&f).unwrap().data[[0, 0, 0, 0]];
        assert!(s > 0.0 && s < 1e-20);
    }

    #[test]
    fn score_at_3_7_matches_series_oracle() {
        // softplus(3.7) = 3.7 + ln(1 + e^-3.7); tanh via (e^{2s}-1)/(e^{2s}+1)
        // evaluated with a Taylor series for ln1p to stay independent of the
        // implementation path.
        let e = (-3.7f64).exp();
        let mut ln1p = 0.0;
        let mut term = e;
        for n in 1..60 {
            ln1p += if n % 2 == 1 { term / n as f64 } else { -term / n as f64 };
            term *= e;
        }
        let s = 3.7 + ln1p;
        let q = (-2.0 * s).exp();
        let oracle = (1.0 - q) / (1.0 + q);
        let f = DisparityVolume::new(Array4::<f64>::from_elem((1, 1, 1, 1), 3.7)).unwrap();
        let got = normalize_score(&f).unwrap().data[[0, 0, 0, 0]];
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn zero_attention_gives_bias_only_response() {
        let f = DisparityVolume::new(Array4::<f64>::zeros((2, 2, 3, 3))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DisparityVolume::new(Array::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let mut p = AggregatorParams::<f64>::zeros(2, 2);
        p.weight.mapv_inplace(|_| 0.3);
        p.bias = Array1::from(vec![0.25, -0.5]);
        let out = aggregate(&f, &v, &p).unwrap();
        for c in 0..2 {
            assert!(out.data.index_axis(ndarray::Axis(0), c).iter().all(|&x| x == p.bias[c]));
        }
    }

    #[test]
    fn plane_sum_kernel_sums_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = DisparityVolume::new(Array::from_shape_fn((3, 2, 2, 4), |_| rng.gen_range(-1.0..1.0))).unwrap();
        let ones = DisparityVolume::new(Array4::<f64>::ones((3, 2, 2, 4))).unwrap();
        let out = aggregate(&ones, &v, &AggregatorParams::plane_sum(2)).unwrap();
        for ((c, h, w), &o) in out.data.indexed_iter() {
            let s: f64 = (0..3).map(|d| v.data[[d, c, h, w]]).sum();
            assert!((o - s).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        let v = DisparityVolume::new(Array4::<f64>::zeros((2, 2, 3, 3))).unwrap();
        let f = DisparityVolume::new(Array4::<f64>::zeros((1, 2, 3, 3))).unwrap();
        assert!(aggregate(&f, &v, &AggregatorParams::plane_sum(2)).is_err());
        assert!(aggregate(&v, &v, &AggregatorParams::plane_sum(3)).is_err());
    }

    #[test]
    fn similarity_peaks_at_matching_plane() {
        for k in 1..=3usize {
            let w = 16;
            let (a, b) = (10, 10 - 2 * k);
            let kl = fmap(1, 1, w, |_, _, x| if x == a { 1.0 } else { 0.0 });
            let kr = fmap(1, 1, w, |_, _, x| if x == b { 1.0 } else { 0.0 });
            let vl = build_shift_volume(&kl, View::Left.shift_sign(), 6).unwrap();
            let vr = build_shift_volume(&kr, View::Right.shift_sign(), 6).unwrap();
            let f = similarity_map(&vl, &vr).unwrap();
            let best = (0..6).max_by(|&i, &j| f.plane_mass(i).total_cmp(&f.plane_mass(j))).unwrap();
            assert_eq!(best, k - 1);
        }
    }

    #[test]
    fn aggregate_matches_nested_loop_oracle() {
        let (d, c, h, w) = (2, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = || rng.gen_range(-1.0f64..1.0);
        let fs = DisparityVolume::new(Array::from_shape_fn((d, c, h, w), |_| r())).unwrap();
        let v = DisparityVolume::new(Array::from_shape_fn((d, c, h, w), |_| r())).unwrap();
        let params = AggregatorParams {
            weight: Array::from_shape_fn((c, c, 3, 3), |_| r()),
            bias: Array::from_shape_fn(c, |_| r()),
        };
        let got = aggregate(&fs, &v, &params).unwrap();
        for o in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = params.bias[o];
                    for p in 0..d {
                        for i in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let (yy, xx) = (yy as usize, xx as usize);
                                    acc += params.weight[[o, i, ky, kx]] * fs.data[[p, i, yy, xx]] * v.data[[p, i, yy, xx]];
                                }
                            }
                        }
                    }
                    assert!((got.data[[o, y, x]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        use crate::train::gradcheck::{grad_check, random_tensor};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        init_aggregator(&mut store, &mut rng, "agg", 2, 2);
        let kl = random_tensor(&mut rng, &[2, 4, 4], 1.0);
        let kr = random_tensor(&mut rng, &[2, 4, 4], 1.0);
        let report = grad_check(&store, &[kl, kr], 12, |t, s, v| {
            let vl = t.shift_volume(v[0], Some(ShiftSign::Plus), 2)?;
            let vr = t.shift_volume(v[1], Some(ShiftSign::Minus), 2)?;
            let f = score_var(t, vl, vr)?;
            aggregate_named(t, s, "agg", Some(f), vr)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = FeatureMap::new(Array::from_shape_fn((3, 4, 6), |_| rng.gen_range(-1.0f32..1.0)), View::Left, 4).unwrap();
        let run = || {
            let v = build_shift_volume(&k, ShiftSign::Plus, 3).unwrap();
            let f = normalize_score(&similarity_map(&v, &v).unwrap()).unwrap();
            aggregate(&f, &v, &AggregatorParams::plane_sum(3)).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
