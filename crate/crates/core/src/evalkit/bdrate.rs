//! Bjøntegaard delta rate with piecewise cubic Hermite interpolation of
//! log-rate over PSNR, integrated in closed form.

use crate::error::{Error, Result};

/// Minimum number of points per curve.
pub const MIN_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
}

/// Rate-distortion curve sorted by increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate and validates: at least [`MIN_POINTS`] finite points,
    /// positive and pairwise distinct rates.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::Domain(format!("an RD curve needs at least {MIN_POINTS} points, got {}", points.len())));
        }
        if let Some(p) = points.iter().find(|p| !p.bpp.is_finite() || !p.psnr_db.is_finite() || p.bpp <= 0.0) {
            return Err(Error::Domain(format!("invalid RD point {p:?}")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Domain("duplicate rates in RD curve".into()));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    /// `(psnr, ln rate)` knots sorted by PSNR, which must be strictly
    /// increasing with rate.
    fn knots(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let x: Vec<f64> = self.points.iter().map(|p| p.psnr_db).collect();
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("PSNR must increase strictly with rate".into()));
        }
        Ok((x, self.points.iter().map(|p| p.bpp.ln()).collect()))
    }
}

/// Shape-preserving derivative estimates (Fritsch–Carlson with the
/// three-point end conditions).
pub fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![d[0], d[0]];
    }
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if d[k - 1] * d[k] <= 0.0 {
            m[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k]);
        }
    }
    let edge = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = edge(h[0], h[1], d[0], d[1]);
    m[n - 1] = edge(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

/// Integral of the cubic Hermite piece on `[x0, x0 + h]` between `x0 + a·h`
/// and `x0 + b·h` (`0 ≤ a ≤ b ≤ 1`).
fn hermite_integral(y0: f64, y1: f64, m0: f64, m1: f64, h: f64, a: f64, b: f64) -> f64 {
    // Antiderivatives of the Hermite basis in the local variable t.
    let h00 = |t: f64| t - t.powi(3) + t.powi(4) / 2.0;
    let h10 = |t: f64| t * t / 2.0 - 2.0 * t.powi(3) / 3.0 + t.powi(4) / 4.0;
    let h01 = |t: f64| t.powi(3) - t.powi(4) / 2.0;
    let h11 = |t: f64| -t.powi(3) / 3.0 + t.powi(4) / 4.0;
    let f = |t: f64| y0 * h00(t) + h * m0 * h10(t) + y1 * h01(t) + h * m1 * h11(t);
    h * (f(b) - f(a))
}

/// Integral of the PCHIP interpolant of `(x, y)` over `[lo, hi]`.
pub fn pchip_integral(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let m = pchip_slopes(x, y);
    let mut total = 0.0;
    for k in 0..x.len() - 1 {
        let (x0, x1) = (x[k], x[k + 1]);
        let (a, b) = (lo.max(x0), hi.min(x1));
        if b <= a {
            continue;
        }
        let h = x1 - x0;
        total += hermite_integral(y[k], y[k + 1], m[k], m[k + 1], h, (a - x0) / h, (b - x0) / h);
    }
    total
}

/// Evaluates the PCHIP interpolant at `t` (clamped to the knot range).
pub fn pchip_eval(x: &[f64], y: &[f64], t: f64) -> f64 {
    let m = pchip_slopes(x, y);
    let t = t.clamp(x[0], x[x.len() - 1]);
    let k = x.windows(2).position(|w| t <= w[1]).unwrap_or(x.len() - 2);
    let h = x[k + 1] - x[k];
    let s = (t - x[k]) / h;
    let (s2, s3) = (s * s, s * s * s);
    y[k] * (2.0 * s3 - 3.0 * s2 + 1.0) + h * m[k] * (s3 - 2.0 * s2 + s) + y[k + 1] * (-2.0 * s3 + 3.0 * s2) + h * m[k + 1] * (s3 - s2)
}

/// Average rate difference of `test` against `anchor` at equal PSNR, in
/// percent; negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (xa, ya) = anchor.knots()?;
    let (xt, yt) = test.knots()?;
    let lo = xa[0].max(xt[0]);
    let hi = xa[xa.len() - 1].min(xt[xt.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Domain(format!("PSNR ranges do not overlap ({lo:.3} ≥ {hi:.3})")));
    }
    let ia = pchip_integral(&xa, &ya, lo, hi);
    let it = pchip_integral(&xt, &yt, lo, hi);
    let avg = (it - ia) / (hi - lo);
    Ok(avg.exp_m1() * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(points.iter().map(|&(bpp, psnr_db)| RdPoint { bpp, psnr_db }).collect()).unwrap()
    }

    #[test]
    fn identical_curves_give_zero() {
        let c = curve(&[(0.1, 30.0), (0.2, 32.5), (0.4, 34.8), (0.8, 36.9)]);
        assert_eq!(bd_rate(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn halved_rates_give_minus_fifty() {
        let pts = [(0.1, 30.0), (0.2, 32.5), (0.4, 34.8), (0.8, 36.9), (1.5, 38.2)];
        let a = curve(&pts);
        let b = curve(&pts.map(|(r, p)| (r / 2.0, p)));
        assert!((bd_rate(&a, &b).unwrap() + 50.0).abs() < 1e-6);
        let c = curve(&pts.map(|(r, p)| (r * 1.3, p)));
        assert!((bd_rate(&a, &c).unwrap() - 30.0).abs() < 1e-6);
    }

    #[test]
    fn interpolant_hits_knots_and_reproduces_lines() {
        let x = [0.0, 1.0, 2.5, 4.0];
        let y = [1.0, 3.0, 6.0, 9.0];
        for (xi, yi) in x.iter().zip(&y) {
            assert!((pchip_eval(&x, &y, *xi) - yi).abs() < 1e-12);
        }
        let line = [2.0, 4.0, 7.0, 10.0];
        let yl: Vec<f64> = line.iter().map(|v| 0.5 * v - 1.0).collect();
        let exact = 0.25 * (10.0f64.powi(2) - 2.0f64.powi(2)) - 8.0;
        assert!((pchip_integral(&line, &yl, 2.0, 10.0) - exact).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(RdCurve::new(vec![RdPoint { bpp: 0.1, psnr_db: 30.0 }; 3]).is_err());
        let a = curve(&[(0.1, 20.0), (0.2, 21.0), (0.3, 22.0), (0.4, 23.0)]);
        let b = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(matches!(bd_rate(&a, &b), Err(Error::Domain(_))));
        let wiggly = curve(&[(0.1, 30.0), (0.2, 29.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(bd_rate(&a, &wiggly).is_err());
    }
}
