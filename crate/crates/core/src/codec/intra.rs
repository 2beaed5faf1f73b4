//! Intra (I-frame) codecs: a small factorized-prior autoencoder and an
//! 8-bit passthrough used for pipeline testing.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bitio::SymbolCoder;
use crate::config::{IntraKind, LATENT_STRIDE};
use crate::em::{channel_params, integer_symbols, FactorizedPrior, SYMBOL_LIMIT};
use crate::error::{shape, Error, Result};
use crate::nn::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::frame::{from_rgb8, to_rgb8};

const PREFIX: &str = "intra";

/// Per-view intra codec.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraCodec {
    pub kind: IntraKind,
    pub channels: usize,
    pub sigma_min: f64,
}

/// Output of one intra-coded view.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraCode {
    pub payload: Vec<u8>,
    pub x_hat: Tensor<f32>,
    pub bits_estimate: f64,
}

impl IntraCodec {
    fn name(i: &str) -> String {
        format!("{PREFIX}.{i}")
    }

    pub fn prior(&self) -> FactorizedPrior {
        FactorizedPrior { prefix: Self::name("fp"), channels: self.channels, sigma_min: self.sigma_min }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        if self.kind == IntraKind::Passthrough {
            return;
        }
        let c = self.channels;
        for i in 0..4 {
            let cin = if i == 0 { 3 } else { c };
            store.init_conv(rng, &Self::name(&format!("e{i}")), cin, c, 3, 1);
            let cout = if i == 3 { 3 } else { c };
            store.init_deconv(rng, &Self::name(&format!("d{i}")), c, cout, 4);
        }
        self.prior().init(store, rng);
    }

    fn analysis<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..4 {
            h = nn::conv(tape, store, &Self::name(&format!("e{i}")), h, 2, 1)?;
            if i < 3 {
                h = nn::lrelu(tape, h);
            }
        }
        Ok(h)
    }

    fn synthesis<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y_hat: Var) -> Result<Var> {
        let mut h = y_hat;
        for i in 0..4 {
            h = nn::deconv(tape, store, &Self::name(&format!("d{i}")), h, 2, 1, 0)?;
            if i < 3 {
                h = nn::lrelu(tape, h);
            }
        }
        Ok(tape.bound(h, T::zero(), T::one()))
    }

    /// Differentiable reconstruction and bits with straight-through rounding.
    /// The passthrough codec returns the 8-bit rounded input and a constant rate.
    pub fn train_forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let (_, h, w) = tape.value(x).chw();
        match self.kind {
            IntraKind::Passthrough => {
                let q = tape.value(x).map(|v| T::from_f64_lossy((v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0));
                let bits = T::from_f64_lossy(24.0 * (h * w) as f64);
                Ok((tape.constant(q), tape.constant(Tensor::scalar(bits))))
            }
            IntraKind::Factorized => {
                let y = self.analysis(tape, store, x)?;
                let y_hat = tape.round_ste(y);
                let bits = self.prior().bits(tape, store, y_hat)?;
                Ok((self.synthesis(tape, store, y_hat)?, bits))
            }
        }
    }

    fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(shape(format!("intra frame {h}x{w} not a multiple of {LATENT_STRIDE}")));
        }
        Ok([self.channels, h / LATENT_STRIDE, w / LATENT_STRIDE])
    }

    pub fn encode(&self, store: &ParamStore<f32>, x: &Tensor<f32>, coder: &dyn SymbolCoder) -> Result<IntraCode> {
        let (_, h, w) = x.chw();
        match self.kind {
            IntraKind::Passthrough => {
                let payload = to_rgb8(x);
                let x_hat = from_rgb8(&payload, h, w)?;
                Ok(IntraCode { payload, x_hat, bits_estimate: 24.0 * (h * w) as f64 })
            }
            IntraKind::Factorized => {
                self.latent_shape(h, w)?;
                let mut tape = Tape::<f32>::inference();
                let xv = tape.constant(x.clone());
                let y = self.analysis(&mut tape, store, xv)?;
                let yq = tape.value(y).map(|v| v.round().clamp(-SYMBOL_LIMIT, SYMBOL_LIMIT));
                let y_hat = tape.constant(yq.clone());
                let bits = self.prior().bits(&mut tape, store, y_hat)?;
                let bits_estimate = tape.value(bits).data()[0] as f64;
                let scales = self.prior().coding_scales(store)?;
                let (mu, sigma) = channel_params(&scales, yq.shape());
                let payload = coder.encode(&integer_symbols(&yq), &mu, &sigma)?;
                let x_hat = self.synthesis(&mut tape, store, y_hat)?;
                Ok(IntraCode { payload, x_hat: tape.value(x_hat).clone(), bits_estimate })
            }
        }
    }

    pub fn decode(&self, store: &ParamStore<f32>, payload: &[u8], h: usize, w: usize, coder: &dyn SymbolCoder) -> Result<Tensor<f32>> {
        match self.kind {
            IntraKind::Passthrough => {
                from_rgb8(payload, h, w).map_err(|e| Error::Decode(format!("intra payload: {e}")))
            }
            IntraKind::Factorized => {
                let ys = self.latent_shape(h, w)?;
                let scales = self.prior().coding_scales(store)?;
                let (mu, sigma) = channel_params(&scales, &ys);
                let symbols = coder
                    .decode(payload, mu.len(), &mu, &sigma)
                    .map_err(|e| Error::SliceDecode { stream: "intra".into(), slice: 0, reason: e.to_string() })?;
                let yq = Tensor::from_vec(&ys, symbols.iter().map(|&s| s as f32).collect())?;
                let mut tape = Tape::<f32>::inference();
                let y_hat = tape.constant(yq);
                let x_hat = self.synthesis(&mut tape, store, y_hat)?;
                Ok(tape.value(x_hat).clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitio::BypassCoder;
    use rand::{Rng, SeedableRng};

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, 32, 48], (0..3 * 32 * 48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn factorized_round_trip_is_bitwise() {
        let codec = IntraCodec { kind: IntraKind::Factorized, channels: 4, sigma_min: 0.11 };
        let mut store = ParamStore::new();
        codec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let x = image(1);
        let enc = codec.encode(&store, &x, &BypassCoder).unwrap();
        assert!(enc.bits_estimate > 0.0);
        let dec = codec.decode(&store, &enc.payload, 32, 48, &BypassCoder).unwrap();
        assert_eq!(dec, enc.x_hat);
        assert!(dec.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn passthrough_costs_24_bits_per_pixel() {
        let codec = IntraCodec { kind: IntraKind::Passthrough, channels: 0, sigma_min: 0.11 };
        let store = ParamStore::new();
        let x = image(2);
        let enc = codec.encode(&store, &x, &BypassCoder).unwrap();
        assert_eq!(enc.payload.len() * 8, 24 * 32 * 48);
        assert_eq!(codec.decode(&store, &enc.payload, 32, 48, &BypassCoder).unwrap(), enc.x_hat);
        assert!(codec.decode(&store, &enc.payload[1..], 32, 48, &BypassCoder).is_err());
    }
}
