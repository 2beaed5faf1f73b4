//! Rate-distortion objective.

use crate::autodiff::{Tape, Var};
use crate::codec::model::StreamBits;
use crate::error::{invalid, shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Streams in [`RdLossBreakdown::rate_bits`] order.
pub const STREAMS: [&str; 4] = ["motion_y", "motion_z", "context_y", "context_z"];

/// Components of the loss of one stereo P-frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RdLossBreakdown {
    /// Mean squared error per view.
    pub distortion: [f64; 2],
    /// Bits per stream per view.
    pub rate_bits: [[f64; 4]; 2],
    /// Pixels per view, the rate normalizer.
    pub pixels: usize,
    pub lambda: f64,
    pub total: f64,
}

impl RdLossBreakdown {
    /// Rate of one view in bits per pixel.
    pub fn rate(&self, view: usize) -> f64 {
        self.rate_bits[view].iter().sum::<f64>() / self.pixels as f64
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.distortion.iter().all(|d| d.is_finite())
            && self.rate_bits.iter().flatten().all(|r| r.is_finite() && *r >= 0.0)
    }
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / n)
}

fn combine(distortion: [f64; 2], rate_bits: [[f64; 4]; 2], pixels: usize, lambda: f64) -> RdLossBreakdown {
    let mut total = 0.0;
    for v in 0..2 {
        total += lambda * distortion[v];
        for r in rate_bits[v] {
            total += r / pixels as f64;
        }
    }
    RdLossBreakdown { distortion, rate_bits, pixels, lambda, total }
}

/// `Σ_views λ·MSE + (motion and context, latent and hyper) bits per pixel`.
pub fn rd_loss(x: [&Tensor<f32>; 2], x_hat: [&Tensor<f32>; 2], rate_bits: [[f64; 4]; 2], lambda: f64) -> Result<RdLossBreakdown> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let (_, h, w) = x[0].chw();
    let distortion = [mse(x[0], x_hat[0])?, mse(x[1], x_hat[1])?];
    Ok(combine(distortion, rate_bits, h * w, lambda))
}

/// Differentiable counterpart of [`rd_loss`]; returns the scalar loss and
/// its breakdown read back from the tape.
pub fn rd_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: [Var; 2],
    x_hat: [Var; 2],
    bits: &[StreamBits; 2],
    lambda: f64,
) -> Result<(Var, RdLossBreakdown)> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let s = tape.shape(x[0]).to_vec();
    let pixels = s[1] * s[2];
    let inv = T::from_f64_lossy(1.0 / pixels as f64);
    let mut terms = Vec::new();
    let mut distortion = [0.0; 2];
    let mut rate_bits = [[0.0; 4]; 2];
    for v in 0..2 {
        let d = tape.mse(x[v], x_hat[v])?;
        distortion[v] = tape.value(d).data()[0].as_f64();
        terms.push(tape.scale(d, T::from_f64_lossy(lambda)));
        let b = bits[v];
        for (k, r) in [b.motion_y, b.motion_z, b.context_y, b.context_z].into_iter().enumerate() {
            rate_bits[v][k] = tape.value(r).data()[0].as_f64();
            terms.push(tape.scale(r, inv));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let mut breakdown = combine(distortion, rate_bits, pixels, lambda);
    breakdown.total = tape.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[2, 1, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_reconstruction_leaves_only_rates() {
        let x = t(&[0.0, 0.25, 0.5, 0.75]);
        let rates = [[4.0, 2.0, 8.0, 1.0], [2.0, 2.0, 2.0, 2.0]];
        let l = rd_loss([&x, &x], [&x, &x], rates, 64.0).unwrap();
        assert_eq!(l.distortion, [0.0, 0.0]);
        assert_eq!(l.total, (15.0 + 8.0) / 2.0);
    }

    #[test]
    fn linear_in_lambda() {
        // Dyadic values keep every operation exact.
        let x = t(&[0.0, 0.25, 0.5, 0.75]);
        let y = t(&[0.5, 0.25, 0.5, 0.25]);
        let rates = [[4.0, 2.0, 8.0, 1.0], [2.0, 2.0, 2.0, 2.0]];
        let a = rd_loss([&x, &x], [&y, &x], rates, 4.0).unwrap();
        let b = rd_loss([&x, &x], [&y, &x], rates, 8.0).unwrap();
        let d: f64 = a.distortion.iter().sum();
        assert_eq!(b.total - a.total, 4.0 * d);
    }

    #[test]
    fn symmetric_views_give_equal_components() {
        let x = t(&[0.1, 0.2, 0.3, 0.4]);
        let y = t(&[0.2, 0.2, 0.3, 0.1]);
        let r = [1.5, 2.5, 3.5, 4.5];
        let l = rd_loss([&x, &x], [&y, &y], [r, r], 10.0).unwrap();
        assert_eq!(l.distortion[0], l.distortion[1]);
        assert_eq!(l.rate(0), l.rate(1));
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let x = t(&[0.0; 4]);
        assert!(rd_loss([&x, &x], [&x, &x], [[0.0; 4]; 2], 0.0).is_err());
    }
}
