//! Channel-sliced entropy model with interleaved cross-view priors.
//!
//! Latents of both views are split into `N` channel slices and coded in the
//! order `(L,1), (R,1), (L,2), (R,2), …`. The Gaussian parameters of slice
//! `n` of view `M` depend on the already coded slices of the same view, on
//! the first `q` slices of the other view (aligned with shift volumes and an
//! attention score), and on the spatial-temporal prior slices `Φ_{1..n}`.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gaussian_bin_bits, Tape, Var};
use crate::bitio::SymbolCoder;
use crate::error::{invalid, shape, Error, Result};
use crate::fer::FerMode;
use crate::hdc::{self, View};
use crate::nn::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 0.11;
/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
/// Largest coded symbol magnitude.
pub const SYMBOL_LIMIT: f32 = 32767.0;

const FP_FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const FP_INIT_SCALE: f64 = 10.0;

/// Latent of one view, `[C_y, H_y, W_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T = f32> {
    pub data: Array3<T>,
    pub view: View,
}

/// `N` contiguous channel blocks of a latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSlices<T = f32> {
    pub slices: Vec<Array3<T>>,
}

impl<T: Scalar> LatentSlices<T> {
    pub fn concat(&self) -> Result<Array3<T>> {
        let views: Vec<_> = self.slices.iter().map(|s| s.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| shape(e.to_string()))
    }
}

/// Mean and scale of one coded slice.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor<f32>,
    pub sigma: Tensor<f32>,
}

/// Prior slices `Φ_{1..N}` of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSlices {
    pub slices: Vec<Tensor<f32>>,
}

/// Quantized hyper latent of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperLatent {
    pub z_hat: Tensor<f32>,
    pub bits: f64,
}

pub fn slice_channels<T: Scalar>(y: &LatentTensor<T>, n: usize) -> Result<LatentSlices<T>> {
    let c = y.data.dim().0;
    if n == 0 || c % n != 0 {
        return Err(invalid(format!("{c} latent channels cannot be split into {n} slices")));
    }
    let width = c / n;
    Ok(LatentSlices {
        slices: (0..n).map(|i| y.data.slice(s![i * width..(i + 1) * width, .., ..]).to_owned()).collect(),
    })
}

/// Interleaved coding order with 1-based slice indices.
pub fn coding_order(n: usize) -> Vec<(View, usize)> {
    (1..=n).flat_map(|i| [(View::Left, i), (View::Right, i)]).collect()
}

/// Number of other-view slices available when coding slice `n` of `view`.
pub fn cross_view_count(view: View, n: usize) -> usize {
    match view {
        View::Left => n - 1,
        View::Right => n,
    }
}

/// `round(y − μ) + μ`.
pub fn quantize_slice<T: Scalar>(y: &[T], mu: &[T]) -> Vec<T> {
    y.iter().zip(mu).map(|(&y, &m)| (y - m).round() + m).collect()
}

/// Estimated code length in bits of `y_hat` under the Gaussian parameters.
pub fn rate_slice(y_hat: &[f32], params: &GaussianParams) -> Result<f64> {
    let (mu, sigma) = (params.mu.data(), params.sigma.data());
    if y_hat.len() != mu.len() || mu.len() != sigma.len() {
        return Err(shape("rate_slice lengths"));
    }
    Ok(y_hat
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&y, &m), &s)| gaussian_bin_bits((y - m) as f64, s as f64, PROB_FLOOR))
        .sum())
}

/// Learned per-channel factorized density over integer-valued tensors,
/// evaluated through a small monotone network per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub prefix: String,
    pub channels: usize,
    pub sigma_min: f64,
}

impl FactorizedPrior {
    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    fn layers() -> usize {
        FP_FILTERS.len() - 1
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        let layers = Self::layers();
        let scale = FP_INIT_SCALE.powf(1.0 / layers as f64);
        for k in 0..layers {
            let (i, o) = (FP_FILTERS[k], FP_FILTERS[k + 1]);
            let init = (1.0 / scale / o as f64).exp_m1().ln();
            store.insert(self.name(&format!("h{k}")), Tensor::full(&[c, o, i], T::from_f64_lossy(init)));
            let b = (0..c * o).map(|_| T::from_f64_lossy(rng.gen_range(-0.5..0.5))).collect();
            store.insert(self.name(&format!("b{k}")), Tensor::from_vec(&[c, o, 1], b).expect("shape"));
            if k + 1 < layers {
                store.insert(self.name(&format!("a{k}")), Tensor::zeros(&[c, o, 1]));
            }
        }
    }

    /// Cumulative logits for `x` of shape `[C, 1, P]`.
    fn logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let layers = Self::layers();
        let mut x = x;
        for k in 0..layers {
            let h = tape.param(store, &self.name(&format!("h{k}")));
            let h = tape.softplus(h);
            x = tape.channel_matmul(h, x)?;
            let b = tape.param(store, &self.name(&format!("b{k}")));
            x = tape.add(x, b)?;
            if k + 1 < layers {
                let a = tape.param(store, &self.name(&format!("a{k}")));
                let a = tape.tanh(a);
                let t = tape.tanh(x);
                let at = tape.mul(a, t)?;
                x = tape.add(x, at)?;
            }
        }
        Ok(x)
    }

    /// Code length in bits of the integer tensor `v` (`[C, H, W]`).
    pub fn bits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, v: Var) -> Result<Var> {
        let s = tape.shape(v).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(shape(format!("factorized prior over {} channels got {s:?}", self.channels)));
        }
        let flat = tape.reshape(v, &[s[0], 1, s[1] * s[2]])?;
        let half = T::from_f64_lossy(0.5);
        let upper = tape.add_scalar(flat, half);
        let lower = tape.add_scalar(flat, -half);
        let lu = self.logits(tape, store, upper)?;
        let ll = self.logits(tape, store, lower)?;
        // Evaluate on the side of the median where the sigmoids do not saturate.
        let sum = tape.add(lu, ll)?;
        let sign = tape.value(sum).map(|v| if v > T::zero() { -T::one() } else { T::one() });
        let sign = tape.constant(sign);
        let su = tape.mul(lu, sign)?;
        let sl = tape.mul(ll, sign)?;
        let pu = tape.sigmoid(su);
        let pl = tape.sigmoid(sl);
        let diff = tape.sub(pu, pl)?;
        let p = tape.abs(diff);
        let p = tape.lower_bound(p, T::from_f64_lossy(PROB_FLOOR));
        let ln = tape.ln(p);
        let total = tape.sum_all(ln);
        Ok(tape.scale(total, T::from_f64_lossy(-1.0 / std::f64::consts::LN_2)))
    }

    /// Per-channel scale used to hand values to a Gaussian symbol coder with
    /// zero mean: the root second moment of the pmf on `[-64, 64]`, floored
    /// at `sigma_min`. Evaluated in double precision.
    pub fn coding_scales<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<f32>> {
        let grid: Vec<f64> = (-64..=64).map(f64::from).collect();
        let c = self.channels;
        let mut p64 = ParamStore::<f64>::new();
        for (name, t) in store.iter() {
            if name.starts_with(&self.name("")) {
                p64.insert(name.clone(), t.cast());
            }
        }
        let mut tape = Tape::<f64>::inference();
        let mut rows = Vec::with_capacity(c * grid.len());
        for _ in 0..c {
            rows.extend_from_slice(&grid);
        }
        let z = tape.constant(Tensor::from_vec(&[c, 1, grid.len()], rows)?);
        let up = tape.add_scalar(z, 0.5);
        let lo = tape.add_scalar(z, -0.5);
        let lu = self.logits(&mut tape, &p64, up)?;
        let ll = self.logits(&mut tape, &p64, lo)?;
        let (lu, ll) = (tape.value(lu).data(), tape.value(ll).data());
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut mass, mut m2) = (0.0, 0.0);
            for (i, g) in grid.iter().enumerate() {
                let k = ch * grid.len() + i;
                let p = (sig(lu[k]) - sig(ll[k])).abs();
                mass += p;
                m2 += p * g * g;
            }
            let var = if mass > 0.0 { m2 / mass } else { 1.0 };
            out.push(var.sqrt().max(self.sigma_min) as f32);
        }
        Ok(out)
    }
}

/// Symbols of an integer tensor for a zero-mean Gaussian coder.
pub fn integer_symbols(v: &Tensor<f32>) -> Vec<i16> {
    v.data().iter().map(|&x| x.round().clamp(-SYMBOL_LIMIT, SYMBOL_LIMIT) as i16).collect()
}

/// Zero means and per-channel scales broadcast over `[C, H, W]`.
pub fn channel_params(scales: &[f32], shape: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let per = shape[1] * shape[2];
    let sigma: Vec<f32> = scales.iter().flat_map(|&s| std::iter::repeat(s).take(per)).collect();
    (vec![0.0; sigma.len()], sigma)
}

/// Entropy model hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub latent_channels: usize,
    pub slices: usize,
    pub hyper_channels: usize,
    /// Channels of each prior slice `Φ_n`.
    pub phi_channels: usize,
    /// Width of the aligned cross-view prior.
    pub prior_channels: usize,
    pub est_hidden: usize,
    pub d_feat: usize,
    /// Channels of `Ctx_1..3` when a temporal context is fused in.
    pub context: Option<[usize; 3]>,
    pub fusion_channels: usize,
    pub sigma_min: f64,
    pub cross_view: bool,
    pub mode: FerMode,
}

impl EmConfig {
    pub fn slice_channels(&self) -> usize {
        self.latent_channels / self.slices
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.latent_channels % self.slices != 0 {
            return Err(invalid(format!(
                "{} latent channels cannot be split into {} slices",
                self.latent_channels, self.slices
            )));
        }
        if self.d_feat == 0 {
            return Err(invalid("latent disparity must be at least 1"));
        }
        if !(self.sigma_min > 0.0) {
            return Err(invalid("sigma_min must be positive"));
        }
        let dims = [self.hyper_channels, self.phi_channels, self.prior_channels, self.est_hidden, self.fusion_channels];
        if dims.contains(&0) {
            return Err(invalid("entropy model widths must be positive"));
        }
        Ok(())
    }
}

/// Receives each slice's Gaussian parameters in coding order and returns `ŷ`.
pub trait SliceSink<T: Scalar> {
    fn slice(&mut self, tape: &mut Tape<T>, view: View, n: usize, y: Option<Var>, mu: Var, sigma: Var) -> Result<Var>;
}

/// Straight-through quantization with a differentiable rate.
#[derive(Default)]
pub struct TrainSink {
    pub bits: [Vec<Var>; 2],
}

impl<T: Scalar> SliceSink<T> for TrainSink {
    fn slice(&mut self, tape: &mut Tape<T>, view: View, _n: usize, y: Option<Var>, mu: Var, sigma: Var) -> Result<Var> {
        let y = y.ok_or_else(|| invalid("training needs the latent"))?;
        let centered = tape.sub(y, mu)?;
        let delta = tape.round_ste(centered);
        let y_hat = tape.add(delta, mu)?;
        let bits = tape.gaussian_bits(delta, sigma, PROB_FLOOR)?;
        let total = tape.sum_all(bits);
        self.bits[view.index()].push(total);
        Ok(y_hat)
    }
}

/// Coded symbols of one slice with the parameters used to code them.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceCode {
    pub symbols: Vec<i16>,
    pub params: GaussianParams,
    pub bits: f64,
}

/// Encoder side: quantizes, records symbols and estimated bits.
#[derive(Default)]
pub struct EncodeSink {
    pub codes: [Vec<SliceCode>; 2],
}

fn to_f32<T: Scalar>(t: &Tensor<T>) -> Tensor<f32> {
    t.cast()
}

impl<T: Scalar> SliceSink<T> for EncodeSink {
    fn slice(&mut self, tape: &mut Tape<T>, view: View, _n: usize, y: Option<Var>, mu: Var, sigma: Var) -> Result<Var> {
        let y = y.ok_or_else(|| invalid("encoding needs the latent"))?;
        let mu_t = to_f32(tape.value(mu));
        let sigma_t = to_f32(tape.value(sigma));
        let y_t = to_f32(tape.value(y));
        let mut symbols = Vec::with_capacity(y_t.numel());
        let mut y_hat = Vec::with_capacity(y_t.numel());
        for (&yv, &m) in y_t.data().iter().zip(mu_t.data()) {
            let d = (yv - m).round().clamp(-SYMBOL_LIMIT, SYMBOL_LIMIT);
            symbols.push(d as i16);
            y_hat.push(d + m);
        }
        let y_hat = Tensor::from_vec(y_t.shape(), y_hat)?;
        let bits = symbols
            .iter()
            .zip(sigma_t.data())
            .map(|(&d, &s)| gaussian_bin_bits(d as f64, s as f64, PROB_FLOOR))
            .sum();
        let params = GaussianParams { mu: mu_t, sigma: sigma_t };
        self.codes[view.index()].push(SliceCode { symbols, params, bits });
        Ok(tape.constant(y_hat.cast()))
    }
}

/// Decoder side: reads each slice from its segment.
pub struct DecodeSink<'a> {
    pub coder: &'a dyn SymbolCoder,
    pub payloads: [Vec<&'a [u8]>; 2],
}

impl<T: Scalar> SliceSink<T> for DecodeSink<'_> {
    fn slice(&mut self, tape: &mut Tape<T>, view: View, n: usize, _y: Option<Var>, mu: Var, sigma: Var) -> Result<Var> {
        let mu_t = to_f32(tape.value(mu));
        let sigma_t = to_f32(tape.value(sigma));
        let payload = self.payloads[view.index()].get(n - 1).ok_or_else(|| Error::SliceDecode {
            stream: view.tag().to_string(),
            slice: n,
            reason: "missing slice payload".into(),
        })?;
        let symbols = self
            .coder
            .decode(payload, mu_t.numel(), mu_t.data(), sigma_t.data())
            .map_err(|e| Error::SliceDecode { stream: view.tag().to_string(), slice: n, reason: e.to_string() })?;
        let y_hat: Vec<f32> = symbols.iter().zip(mu_t.data()).map(|(&d, &m)| d as f32 + m).collect();
        let y_hat = Tensor::from_vec(mu_t.shape(), y_hat)?;
        Ok(tape.constant(y_hat.cast()))
    }
}

/// Parameter names and graph construction for one entropy model.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    pub prefix: String,
    pub cfg: EmConfig,
}

fn pair_index(view: View, n: usize) -> String {
    format!("{}{}", view.tag(), n)
}

impl EntropyModel {
    pub fn new(prefix: impl Into<String>, cfg: EmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(EntropyModel { prefix: prefix.into(), cfg })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let c = &self.cfg;
        let (cy, cz, cs) = (c.latent_channels, c.hyper_channels, c.slice_channels());
        store.init_conv(rng, &self.name("ha0"), cy, cz, 3, 1);
        store.init_conv(rng, &self.name("ha1"), cz, cz, 3, 1);
        store.init_conv(rng, &self.name("ha2"), cz, cz, 3, 1);
        store.init_deconv(rng, &self.name("hs0"), cz, cz, 4);
        store.init_deconv(rng, &self.name("hs1"), cz, cz, 4);
        store.init_conv(rng, &self.name("hs2"), cz, cz, 3, 1);
        let mut phi_in = cz;
        if let Some([c1, c2, c3]) = c.context {
            let f = c.fusion_channels;
            store.init_conv(rng, &self.name("cf0"), c1, f, 3, 1);
            store.init_conv(rng, &self.name("cf1"), f + c2, f, 3, 1);
            store.init_conv(rng, &self.name("cf2"), f + c3, f, 3, 1);
            store.init_conv(rng, &self.name("cf3"), f, f, 3, 1);
            phi_in += f;
        }
        store.init_conv(rng, &self.name("phi"), phi_in, c.slices * c.phi_channels, 3, 1);
        self.hyper_prior().init(store, rng);
        for (view, n) in coding_order(c.slices) {
            let q = cross_view_count(view, n);
            let id = pair_index(view, n);
            if q > 0 {
                store.init_conv(rng, &self.name(&format!("xv.{id}.po")), q * cs, c.prior_channels, 3, 1);
                store.init_conv(rng, &self.name(&format!("xv.{id}.pa")), c.phi_channels, c.prior_channels, 3, 1);
                hdc::init_aggregator(store, rng, &self.name(&format!("xv.{id}.agg")), c.prior_channels, c.prior_channels);
                // Starts as a no-op so an untrained alignment cannot swamp the estimator.
                store.zero_prefix(&self.name(&format!("xv.{id}.agg.")));
            }
            let inputs = c.prior_channels + (n - 1) * cs + n * c.phi_channels;
            let h = c.est_hidden;
            store.init_conv(rng, &self.name(&format!("est.{id}.in")), inputs, h, 1, 1);
            store.init_conv(rng, &self.name(&format!("est.{id}.dw")), h, h, 3, h);
            store.init_conv(rng, &self.name(&format!("est.{id}.pw")), h, h, 1, 1);
            let out = self.name(&format!("est.{id}.out"));
            store.init_conv(rng, &out, h, 2 * cs, 1, 1);
            if let Some(b) = store.get_mut(&format!("{out}.b")) {
                for v in &mut b.data_mut()[cs..] {
                    *v = T::one();
                }
            }
        }
    }

    fn check_latent(&self, s: &[usize]) -> Result<()> {
        if s.len() != 3 || s[0] != self.cfg.latent_channels || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(shape(format!(
                "latent {s:?} must have {} channels and nonzero spatial dims divisible by 4",
                self.cfg.latent_channels
            )));
        }
        Ok(())
    }

    /// Hyper analysis `y → z`.
    pub fn hyper_analysis<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        self.check_latent(tape.shape(y))?;
        let h = nn::conv(tape, store, &self.name("ha0"), y, 1, 1)?;
        let h = nn::lrelu(tape, h);
        let h = nn::conv(tape, store, &self.name("ha1"), h, 2, 1)?;
        let h = nn::lrelu(tape, h);
        nn::conv(tape, store, &self.name("ha2"), h, 2, 1)
    }

    /// Shape of `z` for a latent of spatial size `h × w`.
    pub fn hyper_shape(&self, h: usize, w: usize) -> [usize; 3] {
        [self.cfg.hyper_channels, h / 4, w / 4]
    }

    /// Prior slices `Φ_{1..N}` from `ẑ` and, when configured, `Ctx_{1..3}`.
    pub fn prior_slices<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_hat: Var,
        ctx: Option<[Var; 3]>,
    ) -> Result<Vec<Var>> {
        let h = nn::deconv(tape, store, &self.name("hs0"), z_hat, 2, 1, 0)?;
        let h = nn::lrelu(tape, h);
        let h = nn::deconv(tape, store, &self.name("hs1"), h, 2, 1, 0)?;
        let h = nn::lrelu(tape, h);
        let h = nn::conv(tape, store, &self.name("hs2"), h, 1, 1)?;
        let fused = match (self.cfg.context, ctx) {
            (Some(_), Some([c1, c2, c3])) => {
                let f = nn::conv(tape, store, &self.name("cf0"), c1, 2, 1)?;
                let f = nn::lrelu(tape, f);
                let f = tape.concat(&[f, c2])?;
                let f = nn::conv(tape, store, &self.name("cf1"), f, 2, 1)?;
                let f = nn::lrelu(tape, f);
                let f = tape.concat(&[f, c3])?;
                let f = nn::conv(tape, store, &self.name("cf2"), f, 2, 1)?;
                let f = nn::lrelu(tape, f);
                let f = nn::conv(tape, store, &self.name("cf3"), f, 2, 1)?;
                if tape.shape(f)[1..] != tape.shape(h)[1..] {
                    return Err(shape(format!("context {:?} vs hyper {:?}", tape.shape(f), tape.shape(h))));
                }
                tape.concat(&[h, f])?
            }
            (None, None) => h,
            (Some(_), None) => return Err(invalid("entropy model expects temporal context")),
            (None, Some(_)) => return Err(invalid("entropy model has no context inputs")),
        };
        let fused = nn::lrelu(tape, fused);
        let phi = nn::conv(tape, store, &self.name("phi"), fused, 1, 1)?;
        let p = self.cfg.phi_channels;
        (0..self.cfg.slices).map(|i| tape.narrow(phi, i * p, p)).collect()
    }

    /// Factorized prior over `z`.
    pub fn hyper_prior(&self) -> FactorizedPrior {
        FactorizedPrior { prefix: self.name("fp"), channels: self.cfg.hyper_channels, sigma_min: self.cfg.sigma_min }
    }

    /// Code length of `ẑ` under the factorized prior, summed over elements.
    pub fn hyper_bits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z_hat: Var) -> Result<Var> {
        self.hyper_prior().bits(tape, store, z_hat)
    }

    pub fn hyper_coding_scales<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<f32>> {
        self.hyper_prior().coding_scales(store)
    }

    /// Cross-view prior for slice `n` of `view` from the other view's first
    /// `q` slices, anchored on `Φ_n` of `view`.
    pub fn align<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        view: View,
        n: usize,
        other: &[Var],
        anchor: Var,
    ) -> Result<Var> {
        let q = cross_view_count(view, n);
        if other.len() != q {
            return Err(invalid(format!("slice {n} of view {:?} takes {q} other-view slices, got {}", view, other.len())));
        }
        let s = tape.shape(anchor).to_vec();
        if q == 0 || !self.cfg.cross_view {
            return Ok(tape.constant(Tensor::zeros(&[self.cfg.prior_channels, s[1], s[2]])));
        }
        let id = pair_index(view, n);
        let stacked = tape.concat(other)?;
        let po = nn::conv(tape, store, &self.name(&format!("xv.{id}.po")), stacked, 1, 1)?;
        let pa = nn::conv(tape, store, &self.name(&format!("xv.{id}.pa")), anchor, 1, 1)?;
        let (vo, va) = match self.cfg.mode {
            FerMode::NoShift => (tape.shift_volume(po, None, 1)?, tape.shift_volume(pa, None, 1)?),
            _ => (
                tape.shift_volume(po, Some(view.other().shift_sign()), self.cfg.d_feat)?,
                tape.shift_volume(pa, Some(view.shift_sign()), self.cfg.d_feat)?,
            ),
        };
        let f_star = match self.cfg.mode {
            FerMode::NoAttention => None,
            _ => Some(hdc::score_var(tape, vo, va)?),
        };
        hdc::aggregate_named(tape, store, &self.name(&format!("xv.{id}.agg")), f_star, vo)
    }

    /// `(μ, σ)` of slice `n` of `view` from an aligned prior, the view's own
    /// previous slices and `Φ_{1..n}`.
    pub fn estimate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        view: View,
        n: usize,
        aligned: Var,
        intra: &[Var],
        phis: &[Var],
    ) -> Result<(Var, Var)> {
        if intra.len() != n - 1 || phis.len() != n {
            return Err(invalid(format!("estimator for slice {n} got {} intra and {} prior slices", intra.len(), phis.len())));
        }
        let id = pair_index(view, n);
        let mut parts = vec![aligned];
        parts.extend_from_slice(intra);
        parts.extend_from_slice(phis);
        let x = tape.concat(&parts)?;
        let h = self.cfg.est_hidden;
        let x = nn::conv(tape, store, &self.name(&format!("est.{id}.in")), x, 1, 0)?;
        let x = nn::lrelu(tape, x);
        let d = nn::conv_grouped(tape, store, &self.name(&format!("est.{id}.dw")), x, 1, 1, h)?;
        let d = nn::lrelu(tape, d);
        let d = nn::conv(tape, store, &self.name(&format!("est.{id}.pw")), d, 1, 0)?;
        let x = tape.add(x, d)?;
        let x = nn::lrelu(tape, x);
        let out = nn::conv(tape, store, &self.name(&format!("est.{id}.out")), x, 1, 0)?;
        let cs = self.cfg.slice_channels();
        let mu = tape.narrow(out, 0, cs)?;
        let raw = tape.narrow(out, cs, cs)?;
        let sigma = tape.lower_bound(raw, T::from_f64_lossy(self.cfg.sigma_min));
        Ok((mu, sigma))
    }

    /// Gaussian parameters of `(view, n)` given the decoded state of both
    /// views and the prior slices; reads only what the coding order allows.
    pub fn params_from_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        view: View,
        n: usize,
        decoded: &[Vec<Var>; 2],
        phis: &[Vec<Var>; 2],
    ) -> Result<(Var, Var)> {
        let q = cross_view_count(view, n);
        let own = &decoded[view.index()];
        let other = &decoded[view.other().index()];
        if own.len() < n - 1 || other.len() < q || phis[view.index()].len() < n {
            return Err(Error::State(format!("slice {n} of {view:?} requested before its inputs were decoded")));
        }
        let own_phis = &phis[view.index()][..n];
        let aligned = self.align(tape, store, view, n, &other[..q], own_phis[n - 1])?;
        self.estimate(tape, store, view, n, aligned, &own[..n - 1], own_phis)
    }

    /// Runs the interleaved slice loop and returns `ŷ` of both views.
    pub fn code_slices<T: Scalar, S: SliceSink<T>>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: Option<[Var; 2]>,
        phis: &[Vec<Var>; 2],
        sink: &mut S,
    ) -> Result<[Var; 2]> {
        let cs = self.cfg.slice_channels();
        let mut decoded: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for (view, n) in coding_order(self.cfg.slices) {
            let (mu, sigma) = self.params_from_state(tape, store, view, n, &decoded, phis)?;
            let ys = match y {
                Some(y) => Some(tape.narrow(y[view.index()], (n - 1) * cs, cs)?),
                None => None,
            };
            let y_hat = sink.slice(tape, view, n, ys, mu, sigma)?;
            decoded[view.index()].push(y_hat);
        }
        Ok([tape.concat(&decoded[0])?, tape.concat(&decoded[1])?])
    }
}

/// Differentiable rates of one stereo latent pair.
pub struct TrainOutput {
    pub y_hat: [Var; 2],
    /// Bits of all slices per view.
    pub bits_y: [Var; 2],
    pub bits_z: [Var; 2],
}

impl EntropyModel {
    /// Training forward pass with straight-through rounding.
    pub fn train_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: [Var; 2],
        ctx: Option<[[Var; 3]; 2]>,
    ) -> Result<TrainOutput> {
        let mut phis: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut bits_z = Vec::new();
        for v in View::BOTH {
            let z = self.hyper_analysis(tape, store, y[v.index()])?;
            let z_hat = tape.round_ste(z);
            bits_z.push(self.hyper_bits(tape, store, z_hat)?);
            phis[v.index()] = self.prior_slices(tape, store, z_hat, ctx.map(|c| c[v.index()]))?;
        }
        let mut sink = TrainSink::default();
        let y_hat = self.code_slices(tape, store, Some(y), &phis, &mut sink)?;
        let mut bits_y = Vec::new();
        for v in View::BOTH {
            let parts = &sink.bits[v.index()];
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            bits_y.push(acc);
        }
        Ok(TrainOutput { y_hat, bits_y: [bits_y[0], bits_y[1]], bits_z: [bits_z[0], bits_z[1]] })
    }
}

/// Everything the encoder produces for one stereo latent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmEncoding {
    pub y_hat: [Tensor<f32>; 2],
    pub z_hat: [Tensor<f32>; 2],
    pub hyper_segments: [Vec<u8>; 2],
    pub slice_segments: [Vec<u8>; 2],
    pub slices: [Vec<SliceCode>; 2],
    pub bits_z: [f64; 2],
}

impl EmEncoding {
    /// Sum of estimated slice bits and hyper bits over both views.
    pub fn total_bits_estimate(&self) -> f64 {
        self.slices.iter().flatten().map(|s| s.bits).sum::<f64>() + self.bits_z.iter().sum::<f64>()
    }
}

/// Joins per-slice payloads as `u32 len` + bytes each.
pub fn pack_slices(parts: &[Vec<u8>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in parts {
        let len = u32::try_from(p.len()).map_err(|_| invalid("slice payload exceeds u32"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(p);
    }
    Ok(out)
}

/// Splits a slice segment into at most `n` payloads; a truncated segment
/// yields fewer payloads so decoding fails at the first missing slice.
pub fn unpack_slices(data: &[u8], n: usize) -> Vec<&[u8]> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    while out.len() < n && pos + 4 <= data.len() {
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        pos += 4;
        if len > data.len() - pos {
            break;
        }
        out.push(&data[pos..pos + len]);
        pos += len;
    }
    out
}

impl EntropyModel {
    /// Quantizes and codes a latent pair on an inference tape; returns the
    /// encoding and `ŷ` as tape constants.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        y: [Var; 2],
        ctx: Option<[[Var; 3]; 2]>,
        coder: &dyn SymbolCoder,
    ) -> Result<(EmEncoding, [Var; 2])> {
        let scales = self.hyper_coding_scales(store)?;
        let mut phis: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut z_hats = Vec::new();
        let mut hyper_segments = Vec::new();
        let mut bits_z = [0.0; 2];
        for v in View::BOTH {
            let z = self.hyper_analysis(tape, store, y[v.index()])?;
            let zq = tape.value(z).cast::<f32>().map(|x| x.round().clamp(-SYMBOL_LIMIT, SYMBOL_LIMIT));
            let z_hat = tape.constant(zq.cast());
            let b = self.hyper_bits(tape, store, z_hat)?;
            bits_z[v.index()] = tape.value(b).data()[0].as_f64();
            let (mu, sigma) = channel_params(&scales, zq.shape());
            hyper_segments.push(coder.encode(&integer_symbols(&zq), &mu, &sigma)?);
            phis[v.index()] = self.prior_slices(tape, store, z_hat, ctx.map(|c| c[v.index()]))?;
            z_hats.push(zq);
        }
        let mut sink = EncodeSink::default();
        let y_hat = self.code_slices(tape, store, Some(y), &phis, &mut sink)?;
        let mut slice_segments = Vec::new();
        for v in View::BOTH {
            let parts: Result<Vec<Vec<u8>>> = sink.codes[v.index()]
                .iter()
                .map(|c| coder.encode(&c.symbols, c.params.mu.data(), c.params.sigma.data()))
                .collect();
            slice_segments.push(pack_slices(&parts?)?);
        }
        let y_hat_t = [tape.value(y_hat[0]).cast(), tape.value(y_hat[1]).cast()];
        let [h0, h1]: [Vec<u8>; 2] = hyper_segments.try_into().expect("two views");
        let [s0, s1]: [Vec<u8>; 2] = slice_segments.try_into().expect("two views");
        let [z0, z1]: [Tensor<f32>; 2] = z_hats.try_into().expect("two views");
        let enc = EmEncoding {
            y_hat: y_hat_t,
            z_hat: [z0, z1],
            hyper_segments: [h0, h1],
            slice_segments: [s0, s1],
            slices: sink.codes,
            bits_z,
        };
        Ok((enc, y_hat))
    }

    /// Decodes `ŷ` of both views from hyper and slice segments.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        latent_hw: (usize, usize),
        hyper_segments: [&[u8]; 2],
        slice_segments: [&[u8]; 2],
        ctx: Option<[[Var; 3]; 2]>,
        coder: &dyn SymbolCoder,
    ) -> Result<[Var; 2]> {
        let (h, w) = latent_hw;
        self.check_latent(&[self.cfg.latent_channels, h, w])?;
        let scales = self.hyper_coding_scales(store)?;
        let zs = self.hyper_shape(h, w);
        let mut phis: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for v in View::BOTH {
            let (mu, sigma) = channel_params(&scales, &zs);
            let symbols = coder
                .decode(hyper_segments[v.index()], mu.len(), &mu, &sigma)
                .map_err(|e| Error::SliceDecode { stream: format!("{}-hyper", v.tag()), slice: 0, reason: e.to_string() })?;
            let zq = Tensor::from_vec(&zs, symbols.iter().map(|&s| s as f32).collect())?;
            let z_hat = tape.constant(zq.cast());
            phis[v.index()] = self.prior_slices(tape, store, z_hat, ctx.map(|c| c[v.index()]))?;
        }
        let n = self.cfg.slices;
        let mut sink = DecodeSink {
            coder,
            payloads: [unpack_slices(slice_segments[0], n), unpack_slices(slice_segments[1], n)],
        };
        self.code_slices(tape, store, None, &phis, &mut sink)
    }
}

/// Outcome of the causality perturbation harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CausalityReport {
    pub checks: usize,
    pub violations: usize,
}

/// Perturbs every input a slice may not depend on and checks that its
/// `(μ, σ)` stay bitwise unchanged.
pub fn causality_fuzz(
    em: &EntropyModel,
    store: &ParamStore<f32>,
    latent_hw: (usize, usize),
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CausalityReport> {
    let n = em.cfg.slices;
    let cs = em.cfg.slice_channels();
    let (h, w) = latent_hw;
    let mut report = CausalityReport::default();
    let rand_t = |rng: &mut ChaCha8Rng, c: usize| {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-4.0f32..4.0).round()).collect()).expect("shape")
    };
    for _ in 0..trials {
        let base_y: Vec<Vec<Tensor<f32>>> = (0..2).map(|_| (0..n).map(|_| rand_t(rng, cs)).collect()).collect();
        let base_phi: Vec<Vec<Tensor<f32>>> = (0..2).map(|_| (0..n).map(|_| rand_t(rng, em.cfg.phi_channels)).collect()).collect();
        let view = if rng.gen_bool(0.5) { View::Left } else { View::Right };
        let slice = rng.gen_range(1..=n);
        let q = cross_view_count(view, slice);
        let eval = |y: &[Vec<Tensor<f32>>], phi: &[Vec<Tensor<f32>>]| -> Result<(Tensor<f32>, Tensor<f32>)> {
            let mut tape = Tape::<f32>::inference();
            let mk = |tape: &mut Tape<f32>, set: &[Vec<Tensor<f32>>]| -> [Vec<Var>; 2] {
                [0, 1].map(|v| set[v].iter().map(|t| tape.constant(t.clone())).collect())
            };
            let decoded = mk(&mut tape, y);
            let phis = mk(&mut tape, phi);
            let (mu, sigma) = em.params_from_state(&mut tape, store, view, slice, &decoded, &phis)?;
            Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
        };
        let reference = eval(&base_y, &base_phi)?;
        let (vi, oi) = (view.index(), view.other().index());
        let mut y = base_y.clone();
        let mut phi = base_phi.clone();
        for k in slice - 1..n {
            y[vi][k] = rand_t(rng, cs);
        }
        for k in q..n {
            y[oi][k] = rand_t(rng, cs);
        }
        for k in slice..n {
            phi[vi][k] = rand_t(rng, em.cfg.phi_channels);
        }
        for k in 0..n {
            phi[oi][k] = rand_t(rng, em.cfg.phi_channels);
        }
        let perturbed = eval(&y, &phi)?;
        report.checks += 1;
        let same = |a: &Tensor<f32>, b: &Tensor<f32>| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&reference.0, &perturbed.0) || !same(&reference.1, &perturbed.1) {
            report.violations += 1;
        }
    }
    Ok(report)
}
