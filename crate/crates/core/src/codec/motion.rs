//! Coarse-to-fine block-matching motion search.
//!
//! Flow follows the backward-warp convention used by the compensation
//! network: `current(x, y) ≈ reference(x + u, y + v)`.

use crate::error::{shape, Result};
use crate::tensor::Tensor;

/// Block edge at every pyramid level.
pub const BLOCK: usize = 4;

/// Dense per-pixel displacement `[2, H, W]` holding `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub mv: Tensor<f32>,
}

impl MotionField {
    pub fn zeros(h: usize, w: usize) -> Self {
        MotionField { mv: Tensor::zeros(&[2, h, w]) }
    }

    pub fn mean_abs(&self) -> f32 {
        let d = self.mv.data();
        d.iter().map(|v| v.abs()).sum::<f32>() / d.len().max(1) as f32
    }

    /// Median of one component (0 = horizontal, 1 = vertical).
    pub fn median(&self, component: usize) -> f32 {
        let (_, h, w) = self.mv.chw();
        let mut v = self.mv.data()[component * h * w..(component + 1) * h * w].to_vec();
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }
}

/// BT.709 luma of an RGB `[3, H, W]` tensor.
pub fn luma(x: &Tensor<f32>) -> Plane {
    let (_, h, w) = x.chw();
    let d = x.data();
    let n = h * w;
    let data = (0..n).map(|i| 0.2126 * d[i] + 0.7152 * d[n + i] + 0.0722 * d[2 * n + i]).collect();
    Plane { h, w, data }
}

/// Single-channel image.
#[derive(Clone, Debug)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f32 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.data[yy * self.w + xx]
    }

    /// 2×2 box downsampling; odd trailing rows/columns are dropped.
    fn half(&self) -> Plane {
        let (h, w) = ((self.h / 2).max(1), (self.w / 2).max(1));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (y2, x2) = (2 * y as isize, 2 * x as isize);
                data.push(0.25 * (self.at(y2, x2) + self.at(y2, x2 + 1) + self.at(y2 + 1, x2) + self.at(y2 + 1, x2 + 1)));
            }
        }
        Plane { h, w, data }
    }
}

fn block_cost(cur: &Plane, reference: &Plane, by: usize, bx: usize, u: isize, v: isize) -> f32 {
    let mut sad = 0.0;
    for y in by..(by + BLOCK).min(cur.h) {
        for x in bx..(bx + BLOCK).min(cur.w) {
            sad += (cur.data[y * cur.w + x] - reference.at(y as isize + v, x as isize + u)).abs();
        }
    }
    sad
}

/// Integer block flow per level, refined around the upsampled coarser estimate.
/// Ties prefer the smaller displacement so that static content stays at zero.
pub fn block_match(cur: &Tensor<f32>, reference: &Tensor<f32>, levels: usize, radius: usize) -> Result<MotionField> {
    if cur.shape() != reference.shape() || cur.rank() != 3 || cur.shape()[0] != 3 {
        return Err(shape(format!("motion search needs matching RGB frames, got {:?} and {:?}", cur.shape(), reference.shape())));
    }
    let mut pyr_c = vec![luma(cur)];
    let mut pyr_r = vec![luma(reference)];
    for _ in 1..levels.max(1) {
        let (c, r) = (pyr_c.last().expect("level").half(), pyr_r.last().expect("level").half());
        pyr_c.push(c);
        pyr_r.push(r);
    }
    let r = radius as isize;
    // Per-pixel integer flow of the previous (coarser) level.
    let mut flow: Option<(Plane, Plane)> = None;
    for lvl in (0..pyr_c.len()).rev() {
        let (c, rf) = (&pyr_c[lvl], &pyr_r[lvl]);
        let mut fu = vec![0.0f32; c.h * c.w];
        let mut fv = vec![0.0f32; c.h * c.w];
        for by in (0..c.h).step_by(BLOCK) {
            for bx in (0..c.w).step_by(BLOCK) {
                let (pu, pv) = match &flow {
                    Some((u, v)) => (2.0 * u.at(by as isize / 2, bx as isize / 2), 2.0 * v.at(by as isize / 2, bx as isize / 2)),
                    None => (0.0, 0.0),
                };
                let (pu, pv) = (pu as isize, pv as isize);
                let mut best = (f32::INFINITY, usize::MAX, 0isize, 0isize);
                for dv in -r..=r {
                    for du in -r..=r {
                        let (u, v) = (pu + du, pv + dv);
                        let cost = block_cost(c, rf, by, bx, u, v);
                        let mag = (u.unsigned_abs() + v.unsigned_abs()) as usize;
                        if cost < best.0 || (cost == best.0 && mag < best.1) {
                            best = (cost, mag, u, v);
                        }
                    }
                }
                for y in by..(by + BLOCK).min(c.h) {
                    for x in bx..(bx + BLOCK).min(c.w) {
                        fu[y * c.w + x] = best.2 as f32;
                        fv[y * c.w + x] = best.3 as f32;
                    }
                }
            }
        }
        flow = Some((Plane { h: c.h, w: c.w, data: fu }, Plane { h: c.h, w: c.w, data: fv }));
    }
    let (u, v) = flow.expect("at least one level");
    let mut data = u.data;
    data.extend_from_slice(&v.data);
    Ok(MotionField { mv: Tensor::from_vec(&[2, u.h, u.w], data)? })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random texture sampled at continuous coordinates.
    pub(crate) fn texture(seed: u64) -> impl Fn(f32, f32, usize) -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f32, f32, f32, f32)> = (0..12)
            .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.0..6.28), rng.gen_range(0.2..1.0)))
            .collect();
        move |x, y, c| {
            let s: f32 = waves
                .iter()
                .enumerate()
                .map(|(i, &(fx, fy, ph, a))| a * (fx * x + fy * y * if i % 2 == 0 { 1.0 } else { -1.0 } + ph + c as f32).sin())
                .sum();
            0.5 + 0.08 * s
        }
    }

    fn render(f: &impl Fn(f32, f32, usize) -> f32, h: usize, w: usize, dx: f32) -> Tensor<f32> {
        let mut d = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(x as f32 + dx, y as f32, c));
                }
            }
        }
        Tensor::from_vec(&[3, h, w], d).unwrap()
    }

    #[test]
    fn static_scene_gives_zero_motion() {
        let f = texture(1);
        let x = render(&f, 64, 64, 0.0);
        let m = block_match(&x, &x, 3, 2).unwrap();
        assert_eq!(m.mv.shape(), &[2, 64, 64]);
        assert!(m.mean_abs() < 0.5);
    }

    #[test]
    fn global_translation_is_recovered() {
        // current(x) = reference(x + 2): backward flow u = +2.
        let f = texture(2);
        let reference = render(&f, 64, 64, 0.0);
        let cur = render(&f, 64, 64, 2.0);
        let m = block_match(&cur, &reference, 3, 2).unwrap();
        assert!((m.median(0) - 2.0).abs() <= 0.5, "median u {}", m.median(0));
        assert!(m.median(1).abs() <= 0.5);
    }

    #[test]
    fn coarse_levels_extend_the_search_range() {
        // 7 px exceeds a single-level radius of 2 but not three levels.
        let f = texture(3);
        let reference = render(&f, 64, 64, 0.0);
        let cur = render(&f, 64, 64, 7.0);
        let one = block_match(&cur, &reference, 1, 2).unwrap();
        let three = block_match(&cur, &reference, 3, 2).unwrap();
        assert!((one.median(0) - 7.0).abs() > 0.5);
        assert!((three.median(0) - 7.0).abs() <= 0.5, "median u {}", three.median(0));
    }
}
