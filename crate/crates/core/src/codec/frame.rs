//! Stereo frames, replication padding and 8-bit image I/O.

use std::path::{Path, PathBuf};

use crate::config::FRAME_ALIGN;
use crate::error::{invalid, shape, Error, Result};
use crate::hdc::View;
use crate::tensor::Tensor;

/// One rectified stereo pair with RGB samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub t: usize,
}

impl StereoFrame {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>, t: usize) -> Result<Self> {
        if left.rank() != 3 || left.shape()[0] != 3 || left.shape()[1] == 0 || left.shape()[2] == 0 {
            return Err(shape(format!("frame must be [3, H, W], got {:?}", left.shape())));
        }
        if left.shape() != right.shape() {
            return Err(shape(format!("views differ: {:?} vs {:?}", left.shape(), right.shape())));
        }
        if !left.is_finite() || !right.is_finite() {
            return Err(invalid("frame contains non-finite samples"));
        }
        Ok(StereoFrame { left, right, t })
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.left.shape()[1], self.left.shape()[2])
    }

    pub fn view(&self, v: View) -> &Tensor<f32> {
        match v {
            View::Left => &self.left,
            View::Right => &self.right,
        }
    }

    pub fn views(&self) -> [&Tensor<f32>; 2] {
        [&self.left, &self.right]
    }

    /// Both views padded by edge replication to multiples of [`FRAME_ALIGN`].
    pub fn padded(&self) -> StereoFrame {
        let (h, w) = self.dims();
        let (ph, pw) = (aligned(h), aligned(w));
        StereoFrame { left: pad_replicate(&self.left, ph, pw), right: pad_replicate(&self.right, ph, pw), t: self.t }
    }

    /// Top-left `h × w` region of both views.
    pub fn cropped(&self, h: usize, w: usize) -> Result<StereoFrame> {
        Ok(StereoFrame { left: crop(&self.left, h, w)?, right: crop(&self.right, h, w)?, t: self.t })
    }
}

/// Smallest multiple of [`FRAME_ALIGN`] that is at least `n`.
pub fn aligned(n: usize) -> usize {
    n.div_ceil(FRAME_ALIGN).max(1) * FRAME_ALIGN
}

/// Extends `[C, H, W]` to `[C, ph, pw]` by repeating the last row and column.
pub fn pad_replicate(x: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let (c, h, w) = x.chw();
    let src = x.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        for y in 0..ph {
            let row = &src[ci * h * w + y.min(h - 1) * w..][..w];
            out.extend((0..pw).map(|xx| row[xx.min(w - 1)]));
        }
    }
    Tensor::from_vec(&[c, ph, pw], out).expect("padded shape")
}

/// Top-left `h × w` crop of `[C, H, W]`.
pub fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, sh, sw) = x.chw();
    if h > sh || w > sw {
        return Err(shape(format!("cannot crop {sh}x{sw} to {h}x{w}")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            out.extend_from_slice(&src[ci * sh * sw + y * sw..][..w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Rounds `[0, 1]` samples to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB to planar `[3, H, W]`.
pub fn from_rgb8(rgb: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    if rgb.len() != 3 * h * w {
        return Err(shape(format!("expected {} bytes for {h}x{w} RGB, got {}", 3 * h * w, rgb.len())));
    }
    let mut out = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// Planar `[3, H, W]` to interleaved 8-bit RGB.
pub fn to_rgb8(x: &Tensor<f32>) -> Vec<u8> {
    let (_, h, w) = x.chw();
    let d = x.data();
    (0..h * w).flat_map(|i| (0..3).map(move |c| to_u8(d[c * h * w + i]))).collect()
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(img.as_raw(), h as usize, w as usize)
}

pub fn write_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = x.chw();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(x)).ok_or_else(|| invalid("image buffer size"))?;
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Sorted `*.png` paths in a directory.
pub fn png_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads `<dir>/left/*.png` and `<dir>/right/*.png`, paired in name order.
pub fn read_sequence_dir(dir: &Path) -> Result<Vec<StereoFrame>> {
    let left = png_paths(&dir.join("left"))?;
    let right = png_paths(&dir.join("right"))?;
    if left.len() != right.len() || left.is_empty() {
        return Err(invalid(format!("{}: {} left and {} right frames", dir.display(), left.len(), right.len())));
    }
    left.iter()
        .zip(&right)
        .enumerate()
        .map(|(t, (l, r))| StereoFrame::new(read_png(l)?, read_png(r)?, t))
        .collect()
}

/// Writes frames as `<dir>/{left,right}/NNNNN.png`.
pub fn write_sequence_dir(dir: &Path, frames: &[StereoFrame]) -> Result<()> {
    for view in ["left", "right"] {
        std::fs::create_dir_all(dir.join(view))?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join("left").join(format!("{i:05}.png")), &f.left)?;
        write_png(&dir.join("right").join(format!("{i:05}.png")), &f.right)?;
    }
    Ok(())
}
