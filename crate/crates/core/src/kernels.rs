//! Slice-level forward/backward kernels shared by the tape and the array APIs.
//!
//! All spatial tensors are unbatched `[C, H, W]`, row-major.

use crate::scalar::Scalar;

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Unfolds `src[c, sh, sw]` into `[c·k·k, gh·gw]` patches sampled at
/// `(gy·stride − pad + ky, gx·stride − pad + kx)`, zero outside.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    sh: usize,
    sw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<T> {
    let mut cols = Vec::with_capacity(c * k * k * gh * gw);
    let zero = T::zero();
    for ci in 0..c {
        let plane = &src[ci * sh * sw..(ci + 1) * sh * sw];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, stride, pad, sh, gh);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, stride, pad, sw, gw);
                for gy in 0..gh {
                    if gy < y_lo || gy >= y_hi || x_lo >= x_hi {
                        cols.resize(cols.len() + gw, zero);
                        continue;
                    }
                    let y = gy * stride + ky - pad;
                    let x0 = x_lo * stride + kx - pad;
                    let srow = &plane[y * sw..(y + 1) * sw];
                    cols.resize(cols.len() + x_lo, zero);
                    if stride == 1 {
                        cols.extend_from_slice(&srow[x0..x0 + (x_hi - x_lo)]);
                    } else {
                        cols.extend(srow[x0..].iter().step_by(stride).take(x_hi - x_lo));
                    }
                    cols.resize(cols.len() + gw - x_hi, zero);
                }
            }
        }
    }
    cols
}

/// Output positions `g` in `[lo, hi)` for which `g·stride + offset − pad`
/// falls inside `[0, len)`, clipped to `out`.
fn valid_range(offset: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if len + pad > offset { ((len - 1 + pad - offset) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: accumulates patches back into `dst[c, sh, sw]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    sh: usize,
    sw: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [T],
) {
    let p = gh * gw;
    for ci in 0..c {
        let plane = &mut dst[ci * sh * sw..(ci + 1) * sh * sw];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(ky, stride, pad, sh, gh);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(kx, stride, pad, sw, gw);
                if x_lo >= x_hi {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let x0 = x_lo * stride + kx - pad;
                for gy in y_lo..y_hi {
                    let y = gy * stride + ky - pad;
                    let drow = &mut plane[y * sw + x0..(y + 1) * sw];
                    let srow = &src[gy * gw + x_lo..gy * gw + x_hi];
                    if stride == 1 {
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in drow.iter_mut().step_by(stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution on an unbatched input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.in_h, self.k, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out_len(self.in_w, self.k, self.stride, self.pad)
    }

    fn group_dims(&self) -> (usize, usize, usize) {
        let cig = self.in_c / self.groups;
        let cog = self.out_c / self.groups;
        (cig, cog, cig * self.k * self.k)
    }
}

/// `weight` is `[out_c, in_c / groups, k, k]`, `bias` is `[out_c]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let (cig, cog, kk) = g.group_dims();
    let mut out = vec![T::zero(); g.out_c * p];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let plane = g.in_h * g.in_w;
    for grp in 0..g.groups {
        let xs = &x[grp * cig * plane..(grp + 1) * cig * plane];
        let cols = im2col(xs, cig, g.in_h, g.in_w, g.k, g.stride, g.pad, oh, ow);
        let w = &weight[grp * cog * kk..(grp + 1) * cog * kk];
        let o = &mut out[grp * cog * p..(grp + 1) * cog * p];
        T::gemm(cog, kk, p, w, kk as isize, 1, &cols, p as isize, 1, T::one(), o, p as isize, 1);
    }
    out
}

/// Returns `(dx, dweight, dbias)` for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let (cig, cog, kk) = g.group_dims();
    let plane = g.in_h * g.in_w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.in_c * plane]);
    let mut dw = vec![T::zero(); weight.len()];
    let db: Vec<T> = dout.chunks(p).map(|c| c.iter().copied().sum()).collect();
    for grp in 0..g.groups {
        let xs = &x[grp * cig * plane..(grp + 1) * cig * plane];
        let cols = im2col(xs, cig, g.in_h, g.in_w, g.k, g.stride, g.pad, oh, ow);
        let d = &dout[grp * cog * p..(grp + 1) * cog * p];
        let dwg = &mut dw[grp * cog * kk..(grp + 1) * cog * kk];
        // dW = dout · colsᵀ
        T::gemm(cog, p, kk, d, p as isize, 1, &cols, 1, p as isize, T::zero(), dwg, kk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            let w = &weight[grp * cog * kk..(grp + 1) * cog * kk];
            let mut dcols = vec![T::zero(); kk * p];
            // dcols = Wᵀ · dout
            T::gemm(kk, cog, p, w, 1, kk as isize, d, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
            let dxg = &mut dx[grp * cig * plane..(grp + 1) * cig * plane];
            col2im(&dcols, cig, g.in_h, g.in_w, g.k, g.stride, g.pad, oh, ow, dxg);
        }
    }
    (dx, dw, db)
}

/// Geometry of a 2-D transposed convolution on an unbatched input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl DeconvGeom {
    pub fn out_h(&self) -> usize {
        conv_transpose_out_len(self.in_h, self.k, self.stride, self.pad, self.out_pad)
    }

    pub fn out_w(&self) -> usize {
        conv_transpose_out_len(self.in_w, self.k, self.stride, self.pad, self.out_pad)
    }
}

/// `weight` is `[in_c, out_c, k, k]`.
pub fn deconv2d_forward<T: Scalar>(
    g: &DeconvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = g.in_h * g.in_w;
    let kk = g.out_c * g.k * g.k;
    let mut cols = vec![T::zero(); kk * hw];
    // cols = Wᵀ · X
    T::gemm(kk, g.in_c, hw, weight, 1, kk as isize, x, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
    let mut out = vec![T::zero(); g.out_c * oh * ow];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(b[co]);
        }
    }
    col2im(&cols, g.out_c, oh, ow, g.k, g.stride, g.pad, g.in_h, g.in_w, &mut out);
    out
}

/// Returns `(dx, dweight, dbias)` for [`deconv2d_forward`].
pub fn deconv2d_backward<T: Scalar>(
    g: &DeconvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = g.in_h * g.in_w;
    let kk = g.out_c * g.k * g.k;
    let dcols = im2col(dout, g.out_c, oh, ow, g.k, g.stride, g.pad, g.in_h, g.in_w);
    let db: Vec<T> = dout.chunks(oh * ow).map(|c| c.iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); weight.len()];
    // dW = X · dcolsᵀ
    T::gemm(g.in_c, hw, kk, x, hw as isize, 1, &dcols, 1, hw as isize, T::zero(), &mut dw, kk as isize, 1);
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.in_c * hw];
        T::gemm(g.in_c, kk, hw, weight, kk as isize, 1, &dcols, hw as isize, 1, T::zero(), &mut dx, hw as isize, 1);
        dx
    });
    (dx, dw, db)
}

/// Horizontal shift direction of a disparity volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftSign {
    /// Plane `d` samples column `w + (d + 1)`.
    Plus,
    /// Plane `d` samples column `w − (d + 1)`.
    Minus,
}

impl ShiftSign {
    fn offset(self, d: usize) -> isize {
        match self {
            ShiftSign::Plus => d as isize + 1,
            ShiftSign::Minus => -(d as isize + 1),
        }
    }
}

/// Shift offset for volume plane `d`; `None` means the zero-shift plane used
/// by the no-shift ablation.
pub type PlaneShift = Option<ShiftSign>;

/// `[C, H, W] → [D, C, H, W]` horizontal shift stack, zero-filled out of range.
pub fn shift_volume_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    sign: PlaneShift,
    planes: usize,
) -> Vec<T> {
    let chw = c * h * w;
    let mut out = vec![T::zero(); planes * chw];
    for d in 0..planes {
        let off = sign.map_or(0, |s| s.offset(d));
        let dst = &mut out[d * chw..(d + 1) * chw];
        for row in 0..c * h {
            let src = &x[row * w..(row + 1) * w];
            let drow = &mut dst[row * w..(row + 1) * w];
            for (col, v) in drow.iter_mut().enumerate() {
                let s = col as isize + off;
                if s >= 0 && s < w as isize {
                    *v = src[s as usize];
                }
            }
        }
    }
    out
}

/// Adjoint of [`shift_volume_forward`].
pub fn shift_volume_backward<T: Scalar>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    sign: PlaneShift,
    planes: usize,
) -> Vec<T> {
    let chw = c * h * w;
    let mut dx = vec![T::zero(); chw];
    for d in 0..planes {
        let off = sign.map_or(0, |s| s.offset(d));
        let src = &dout[d * chw..(d + 1) * chw];
        for row in 0..c * h {
            let srow = &src[row * w..(row + 1) * w];
            let drow = &mut dx[row * w..(row + 1) * w];
            for (col, &g) in srow.iter().enumerate() {
                let s = col as isize + off;
                if s >= 0 && s < w as isize {
                    drow[s as usize] += g;
                }
            }
        }
    }
    dx
}

struct Bilinear<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    inside_x: bool,
    inside_y: bool,
}

fn bilinear_at<T: Scalar>(px: T, py: T, h: usize, w: usize) -> Bilinear<T> {
    let maxx = T::from_usize(w - 1).unwrap();
    let maxy = T::from_usize(h - 1).unwrap();
    let inside_x = px > T::zero() && px < maxx;
    let inside_y = py > T::zero() && py < maxy;
    let sx = px.max(T::zero()).min(maxx);
    let sy = py.max(T::zero()).min(maxy);
    let fx = sx.floor();
    let fy = sy.floor();
    let x0 = fx.to_usize().unwrap();
    let y0 = fy.to_usize().unwrap();
    Bilinear {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: sx - fx,
        ay: sy - fy,
        inside_x,
        inside_y,
    }
}

/// Backward warp: `out[c, y, x] = feat[c, y + v, x + u]` with bilinear
/// sampling and edge clamping; `flow` is `[2, H, W]` holding `(u, v)`.
pub fn warp_forward<T: Scalar>(feat: &[T], flow: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = T::from_usize(x).unwrap() + flow[i];
            let py = T::from_usize(y).unwrap() + flow[hw + i];
            let b = bilinear_at(px, py, h, w);
            let one = T::one();
            for ci in 0..c {
                let f = &feat[ci * hw..(ci + 1) * hw];
                let top = f[b.y0 * w + b.x0] * (one - b.ax) + f[b.y0 * w + b.x1] * b.ax;
                let bot = f[b.y1 * w + b.x0] * (one - b.ax) + f[b.y1 * w + b.x1] * b.ax;
                out[ci * hw + i] = top * (one - b.ay) + bot * b.ay;
            }
        }
    }
    out
}

/// Returns `(dfeat, dflow)` for [`warp_forward`].
pub fn warp_backward<T: Scalar>(
    feat: &[T],
    flow: &[T],
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut dfeat = vec![T::zero(); c * hw];
    let mut dflow = vec![T::zero(); 2 * hw];
    let one = T::one();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = T::from_usize(x).unwrap() + flow[i];
            let py = T::from_usize(y).unwrap() + flow[hw + i];
            let b = bilinear_at(px, py, h, w);
            let (mut gu, mut gv) = (T::zero(), T::zero());
            for ci in 0..c {
                let g = dout[ci * hw + i];
                let f = &feat[ci * hw..(ci + 1) * hw];
                let df = &mut dfeat[ci * hw..(ci + 1) * hw];
                df[b.y0 * w + b.x0] += g * (one - b.ax) * (one - b.ay);
                df[b.y0 * w + b.x1] += g * b.ax * (one - b.ay);
                df[b.y1 * w + b.x0] += g * (one - b.ax) * b.ay;
                df[b.y1 * w + b.x1] += g * b.ax * b.ay;
                let (f00, f01) = (f[b.y0 * w + b.x0], f[b.y0 * w + b.x1]);
                let (f10, f11) = (f[b.y1 * w + b.x0], f[b.y1 * w + b.x1]);
                gu += g * ((f01 - f00) * (one - b.ay) + (f11 - f10) * b.ay);
                gv += g * ((f10 - f00) * (one - b.ax) + (f11 - f01) * b.ax);
            }
            if b.inside_x {
                dflow[i] = gu;
            }
            if b.inside_y {
                dflow[hw + i] = gv;
            }
        }
    }
    (dfeat, dflow)
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ci * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[(ci * oh + y) * ow + xx] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = dout[(ci * oh + y) * ow + xx] * quarter;
                let base = ci * h * w;
                dx[base + 2 * y * w + 2 * xx] = g;
                dx[base + 2 * y * w + 2 * xx + 1] = g;
                dx[base + (2 * y + 1) * w + 2 * xx] = g;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let cig = g.in_c / g.groups;
        let cog = g.out_c / g.groups;
        let mut out = vec![0.0; g.out_c * oh * ow];
        for co in 0..g.out_c {
            let grp = co / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for cl in 0..cig {
                        let ci = grp * cig + cl;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let y = (oy * g.stride + ky) as isize - g.pad as isize;
                                let xx = (ox * g.stride + kx) as isize - g.pad as isize;
                                if y < 0 || xx < 0 || y >= g.in_h as isize || xx >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((co * cig + cl) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.in_h + y as usize) * g.in_w + xx as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.5).collect()
    }

    #[test]
    fn conv_matches_nested_loops() {
        for &(stride, pad, groups) in &[(1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 0, 4)] {
            let g = ConvGeom { in_c: 4, in_h: 6, in_w: 5, out_c: 4, k: 3, stride, pad, groups };
            let x = ramp(4 * 30, 0.05);
            let w = ramp(4 * (4 / groups) * 9, 0.03);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&g, &x, &w, Some(&b));
            let slow = naive_conv(&g, &x, &w, &b);
            for (a, s) in fast.iter().zip(&slow) {
                assert!((a - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> with shared weights and no bias.
        let cg = ConvGeom { in_c: 3, in_h: 8, in_w: 8, out_c: 2, k: 4, stride: 2, pad: 1, groups: 1 };
        let dg = DeconvGeom { in_c: 2, in_h: 4, in_w: 4, out_c: 3, k: 4, stride: 2, pad: 1, out_pad: 0 };
        assert_eq!((dg.out_h(), dg.out_w()), (8, 8));
        let x = ramp(3 * 64, 0.02);
        let y = ramp(2 * 16, 0.07);
        // conv weight [2, 3, 4, 4]; deconv weight [2, 3, 4, 4] is the same layout.
        let w = ramp(2 * 3 * 16, 0.01);
        let cx = conv2d_forward(&cg, &x, &w, None);
        let dy = deconv2d_forward(&dg, &y, &w, None);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn shift_volume_adjoint() {
        let x = ramp(2 * 3 * 5, 0.1);
        for sign in [Some(ShiftSign::Plus), Some(ShiftSign::Minus), None] {
            let v = shift_volume_forward(&x, 2, 3, 5, sign, 3);
            let y = ramp(v.len(), 0.3);
            let back = shift_volume_backward(&y, 2, 3, 5, sign, 3);
            let lhs: f64 = v.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let f = ramp(2 * 4 * 6, 0.1);
        let flow = vec![0.0; 2 * 24];
        assert_eq!(warp_forward(&f, &flow, 2, 4, 6), f);
    }
}
