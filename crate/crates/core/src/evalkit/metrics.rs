//! Distortion and rate metrics.

use crate::codec::container::Container;
use crate::error::{invalid, shape, Result};
use crate::tensor::Tensor;

/// Peak value of 8-bit samples.
pub const PEAK: f64 = 255.0;

/// `10·log10(255² / mse)`; zero error maps to `+∞`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// RGB-PSNR of two sample arrays on the 8-bit scale `[0, 255]`, with the
/// mean squared error taken over all pixels and channels.
pub fn psnr_rgb(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(invalid("no samples"));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// RGB-PSNR of two `[0, 1]` frames after rounding both to 8 bits, which is
/// what a file-based comparison sees.
pub fn psnr_frames(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let q = |t: &Tensor<f32>| -> Vec<f64> { t.data().iter().map(|&v| f64::from(crate::codec::frame::to_u8(v))).collect() };
    psnr_rgb(&q(x), &q(y))
}

/// Bits per pixel: `bits / (frames · views · height · width)`.
pub fn bpp(total_bits: u64, height: usize, width: usize, frames: usize, views: usize) -> Result<f64> {
    let pixels = height * width * frames * views;
    if pixels == 0 {
        return Err(invalid("bpp needs a positive pixel count"));
    }
    Ok(total_bits as f64 / pixels as f64)
}

/// Bpp of a whole container over its original frame size, both views.
pub fn container_bpp(c: &Container) -> Result<f64> {
    bpp(8 * c.byte_len() as u64, c.height as usize, c.width as usize, c.frames.len(), 2)
}
