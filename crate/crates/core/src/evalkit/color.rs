//! 8-bit RGB images and limited-range BT.709 conversion from 4:2:0 planes.

use crate::error::{shape, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(shape(format!("{} bytes for a {width}x{height} RGB image", data.len())));
        }
        Ok(Rgb8 { width, height, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        crate::codec::frame::from_rgb8(&self.data, self.height, self.width)
    }

    pub fn from_tensor(x: &Tensor<f32>) -> Result<Self> {
        let (_, h, w) = x.chw();
        Rgb8::new(w, h, crate::codec::frame::to_rgb8(x))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Planar 4:2:0 frame; chroma planes are `ceil(W/2) × ceil(H/2)`.
#[derive(Clone, Copy, Debug)]
pub struct Yuv420<'a> {
    pub width: usize,
    pub height: usize,
    pub y: &'a [u8],
    pub u: &'a [u8],
    pub v: &'a [u8],
}

impl<'a> Yuv420<'a> {
    pub fn chroma_dims(width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(2), height.div_ceil(2))
    }

    /// Bytes in one frame of the given size.
    pub fn frame_len(width: usize, height: usize) -> usize {
        let (cw, ch) = Self::chroma_dims(width, height);
        width * height + 2 * cw * ch
    }

    /// Splits one packed frame (`Y`, then `U`, then `V`).
    pub fn from_packed(bytes: &'a [u8], width: usize, height: usize) -> Result<Self> {
        if bytes.len() != Self::frame_len(width, height) {
            return Err(shape(format!("{} bytes for a {width}x{height} 4:2:0 frame", bytes.len())));
        }
        let (cw, ch) = Self::chroma_dims(width, height);
        let (y, rest) = bytes.split_at(width * height);
        let (u, v) = rest.split_at(cw * ch);
        Ok(Yuv420 { width, height, y, u, v })
    }
}

const KR: f64 = 0.2126;
const KB: f64 = 0.0722;

/// Limited-range BT.709 to RGB on the 8-bit scale, before clamping.
pub fn bt709_limited(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let kg = 1.0 - KR - KB;
    let luma = (y - 16.0) / 219.0;
    let pb = (cb - 128.0) / 224.0;
    let pr = (cr - 128.0) / 224.0;
    let r = luma + 2.0 * (1.0 - KR) * pr;
    let b = luma + 2.0 * (1.0 - KB) * pb;
    let g = (luma - KR * r - KB * b) / kg;
    [255.0 * r, 255.0 * g, 255.0 * b]
}

/// Chroma sample at luma position `(row, col)`: bilinear, with chroma
/// sample `(i, j)` co-sited with luma `(2i, 2j)` and edge clamping.
fn chroma_at(plane: &[u8], cw: usize, ch: usize, row: usize, col: usize) -> f64 {
    let (i0, j0) = (row / 2, col / 2);
    let (i1, j1) = ((i0 + 1).min(ch - 1), (j0 + 1).min(cw - 1));
    let fy = if row % 2 == 1 { 0.5 } else { 0.0 };
    let fx = if col % 2 == 1 { 0.5 } else { 0.0 };
    let p = |i: usize, j: usize| f64::from(plane[i * cw + j]);
    let top = p(i0, j0) * (1.0 - fx) + p(i0, j1) * fx;
    let bottom = p(i1, j0) * (1.0 - fx) + p(i1, j1) * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn yuv420_to_rgb_bt709(f: &Yuv420) -> Result<Rgb8> {
    let (w, h) = (f.width, f.height);
    let (cw, ch) = Yuv420::chroma_dims(w, h);
    if w == 0 || h == 0 {
        return Err(shape("empty frame"));
    }
    if f.y.len() != w * h || f.u.len() != cw * ch || f.v.len() != cw * ch {
        return Err(shape(format!(
            "planes {}/{}/{} do not fit {w}x{h} 4:2:0",
            f.y.len(),
            f.u.len(),
            f.v.len()
        )));
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for row in 0..h {
        for col in 0..w {
            let cb = chroma_at(f.u, cw, ch, row, col);
            let cr = chroma_at(f.v, cw, ch, row, col);
            let rgb = bt709_limited(f64::from(f.y[row * w + col]), cb, cr);
            data.extend(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    Rgb8::new(w, h, data)
}
