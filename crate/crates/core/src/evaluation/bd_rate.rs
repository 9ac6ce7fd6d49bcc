//! Rate-distortion curves and the average rate difference between two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operating points of one codec, strictly increasing in rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    bpp: Vec<f64>,
    quality: Vec<f64>,
}

impl RdCurve {
    /// `(bpp, quality)` pairs in any order.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::BdRate(format!("a curve needs at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|&(r, q)| !(r > 0.0 && r.is_finite() && q.is_finite())) {
            return Err(Error::BdRate("curve points need positive finite rate and finite quality".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::BdRate("curve rates must be distinct".into()));
        }
        Ok(Self {
            bpp: points.iter().map(|p| p.0).collect(),
            quality: points.iter().map(|p| p.1).collect(),
        })
    }

    pub fn bpp(&self) -> &[f64] {
        &self.bpp
    }

    pub fn quality(&self) -> &[f64] {
        &self.quality
    }

    pub fn len(&self) -> usize {
        self.bpp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bpp.is_empty()
    }

    /// Same qualities at `factor` times the rate.
    pub fn scale_rate(&self, factor: f64) -> Result<Self> {
        Self::new(self.bpp.iter().map(|r| r * factor).zip(self.quality.iter().copied()).collect())
    }
}

/// Shape-preserving piecewise cubic through strictly increasing `xs`.
/// Two points give a straight line.
struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { xs, ys, slopes }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.iter().rposition(|&xi| xi <= x) {
            Some(i) => i.min(n - 2),
            None => 0,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Integral over `[a, b]`: Simpson's rule between knots, which is exact
    /// for each cubic piece.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut knots: Vec<f64> = vec![a];
        knots.extend(self.xs.iter().copied().filter(|&x| x > a && x < b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| {
                let (l, r) = (w[0], w[1]);
                (r - l) / 6.0 * (self.eval(l) + 4.0 * self.eval(0.5 * (l + r)) + self.eval(r))
            })
            .sum()
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// Log-rate as a function of quality, sorted by quality.
fn log_rate_of_quality(c: &RdCurve) -> Result<Pchip> {
    let mut pts: Vec<(f64, f64)> = c.quality.iter().copied().zip(c.bpp.iter().map(|r| r.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::BdRate("curve qualities must be distinct".into()));
    }
    Ok(Pchip::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()))
}

/// Average rate change of `test` relative to `reference`, in percent, over
/// the quality range both curves cover. Positive means `test` spends more.
pub fn bd_rate(reference: &RdCurve, test: &RdCurve) -> Result<f64> {
    let r = log_rate_of_quality(reference)?;
    let t = log_rate_of_quality(test)?;
    let lo = r.xs[0].max(t.xs[0]);
    let hi = r.xs[r.xs.len() - 1].min(t.xs[t.xs.len() - 1]);
    if !(hi > lo) {
        return Err(Error::BdRate(format!(
            "quality ranges do not overlap ([{:.4}, {:.4}] vs [{:.4}, {:.4}])",
            r.xs[0],
            r.xs[r.xs.len() - 1],
            t.xs[0],
            t.xs[t.xs.len() - 1]
        )));
    }
    let mean_diff = (t.integrate(lo, hi) - r.integrate(lo, hi)) / (hi - lo);
    Ok(mean_diff.exp_m1() * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> RdCurve {
        RdCurve::new(vec![(0.15, 22.0), (0.30, 25.5), (0.45, 27.0), (0.6, 28.1)]).unwrap()
    }

    #[test]
    fn pchip_interpolates_and_preserves_monotonicity() {
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0, 3.0]);
        for (x, y) in [(0.0, 0.0), (1.0, 1.0), (2.0, 1.0), (3.0, 3.0)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
        // flat segment stays flat
        assert!((p.eval(1.5) - 1.0).abs() < 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=300 {
            let v = p.eval(i as f64 / 100.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn integral_of_line() {
        let p = Pchip::new(vec![1.0, 3.0], vec![2.0, 6.0]);
        assert!((p.integrate(1.5, 2.5) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reference_offsets() {
        let r = reference();
        assert_eq!(bd_rate(&r, &r).unwrap(), 0.0);
        assert!((bd_rate(&r, &r.scale_rate(2.0).unwrap()).unwrap() - 100.0).abs() < 1e-9);
        assert!((bd_rate(&r, &r.scale_rate(0.5).unwrap()).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(RdCurve::new(vec![(0.1, 1.0)]).is_err());
        assert!(RdCurve::new(vec![(0.1, 1.0), (0.1, 2.0)]).is_err());
        let a = RdCurve::new(vec![(0.1, 1.0), (0.2, 2.0)]).unwrap();
        let b = RdCurve::new(vec![(0.1, 3.0), (0.2, 4.0)]).unwrap();
        assert!(matches!(bd_rate(&a, &b), Err(Error::BdRate(_))));
    }

    #[test]
    fn two_point_curves_use_a_line() {
        let a = RdCurve::new(vec![(0.1, 20.0), (0.4, 30.0)]).unwrap();
        let b = RdCurve::new(vec![(0.2, 20.0), (0.8, 30.0)]).unwrap();
        assert!((bd_rate(&a, &b).unwrap() - 100.0).abs() < 1e-9);
    }
}
