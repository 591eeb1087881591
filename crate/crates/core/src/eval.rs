//! Rate-distortion evaluation: PSNR, bits per pixel, Bjøntegaard deltas and
//! bit allocation maps.

use bisic_tensor::Graph;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coding::{compress, decompress};
use crate::data::{pairs_to_tensor, Image, StereoPair};
use crate::error::{Error, Result};
use crate::model::{Model, Quantizer, LATENT_STRIDE};
use crate::msssim::ms_ssim;
use crate::nn::Ctx;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Minimum number of points on a curve for Bjøntegaard metrics.
pub const BD_MIN_POINTS: usize = 4;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// One evaluated operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub bpp: [f64; 2],
    pub psnr: [f64; 2],
    pub msssim: [f64; 2],
}

impl RdPoint {
    pub fn bpp_avg(&self) -> f64 {
        0.5 * (self.bpp[0] + self.bpp[1])
    }

    pub fn psnr_avg(&self) -> f64 {
        0.5 * (self.psnr[0] + self.psnr[1])
    }

    pub fn msssim_avg(&self) -> f64 {
        0.5 * (self.msssim[0] + self.msssim[1])
    }

    /// Mean of several points, view by view.
    pub fn mean(points: &[RdPoint]) -> RdPoint {
        let n = points.len().max(1) as f64;
        let avg = |f: &dyn Fn(&RdPoint) -> [f64; 2]| {
            let s = points.iter().map(f).fold([0.0; 2], |a, b| [a[0] + b[0], a[1] + b[1]]);
            [s[0] / n, s[1] / n]
        };
        RdPoint {
            lambda: points.first().map_or(0.0, |p| p.lambda),
            bpp: avg(&|p| p.bpp),
            psnr: avg(&|p| p.psnr),
            msssim: avg(&|p| p.msssim),
        }
    }
}

/// Compresses and decompresses `pair`, measuring the real container size.
pub fn evaluate_pair(model: &Model, pair: &StereoPair, lambda: f64) -> Result<RdPoint> {
    let c = compress(model, pair)?;
    let bytes = c.bitstream.to_bytes();
    let d = decompress(model, &bytes)?;
    let mut psnr_v = [0.0; 2];
    let mut ssim_v = [0.0; 2];
    for v in 0..2 {
        psnr_v[v] = psnr(pair.view(v), d.pair.view(v))?;
        ssim_v[v] = ms_ssim(pair.view(v), d.pair.view(v))?;
    }
    Ok(RdPoint { lambda, bpp: c.bitstream.bpp(), psnr: psnr_v, msssim: ssim_v })
}

/// Mean operating point of `model` over `pairs`.
pub fn evaluate_set(model: &Model, pairs: &[StereoPair], lambda: f64) -> Result<RdPoint> {
    if pairs.is_empty() {
        return Err(Error::Param("empty evaluation set".into()));
    }
    let points = pairs.iter().map(|p| evaluate_pair(model, p, lambda)).collect::<Result<Vec<_>>>()?;
    Ok(RdPoint::mean(&points))
}

/// Quality as a function of log10(rate), or the inverse.
#[derive(Clone, Debug, PartialEq)]
pub enum Fit {
    /// Least-squares cubic, coefficients from the constant term up.
    Cubic([f64; 4]),
    /// Monotone piecewise cubic Hermite interpolant through the knots.
    Pchip { x: Vec<f64>, y: Vec<f64>, slope: Vec<f64> },
}

impl Fit {
    /// Cubic fit of `y(x)`, replaced by a monotone Hermite interpolant when the
    /// cubic is not monotone over the data range. `x` must be strictly increasing.
    pub fn new(x: &[f64], y: &[f64]) -> Result<Fit> {
        if x.len() != y.len() || x.len() < BD_MIN_POINTS {
            return Err(Error::Param(format!("need at least {BD_MIN_POINTS} points, got {}", x.len())));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Param("curve abscissae must be strictly increasing".into()));
        }
        let c = cubic_fit(x, y)?;
        let fit = Fit::Cubic(c);
        if fit.is_monotone(x[0], x[x.len() - 1]) {
            Ok(fit)
        } else {
            Ok(Fit::pchip(x, y))
        }
    }

    pub fn pchip(x: &[f64], y: &[f64]) -> Fit {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        m[0] = pchip_end(h[0], h.get(1).copied().unwrap_or(h[0]), d[0], d.get(1).copied().unwrap_or(d[0]));
        m[n - 1] = pchip_end(
            h[n - 2],
            if n > 2 { h[n - 3] } else { h[n - 2] },
            d[n - 2],
            if n > 2 { d[n - 3] } else { d[n - 2] },
        );
        Fit::Pchip { x: x.to_vec(), y: y.to_vec(), slope: m }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Fit::Cubic(c) => ((c[3] * t + c[2]) * t + c[1]) * t + c[0],
            Fit::Pchip { x, y, slope } => {
                let i = segment(x, t);
                let h = x[i + 1] - x[i];
                let s = (t - x[i]) / h;
                let (s2, s3) = (s * s, s * s * s);
                (2.0 * s3 - 3.0 * s2 + 1.0) * y[i]
                    + (s3 - 2.0 * s2 + s) * h * slope[i]
                    + (-2.0 * s3 + 3.0 * s2) * y[i + 1]
                    + (s3 - s2) * h * slope[i + 1]
            }
        }
    }

    /// Exact integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            Fit::Cubic(c) => {
                let p = |t: f64| (((c[3] / 4.0 * t + c[2] / 3.0) * t + c[1] / 2.0) * t + c[0]) * t;
                p(b) - p(a)
            }
            Fit::Pchip { x, .. } => {
                // Simpson's rule is exact on each cubic piece.
                let mut cuts = vec![a];
                cuts.extend(x.iter().copied().filter(|&k| k > a && k < b));
                cuts.push(b);
                cuts.windows(2)
                    .map(|w| (w[1] - w[0]) / 6.0 * (self.eval(w[0]) + 4.0 * self.eval(0.5 * (w[0] + w[1])) + self.eval(w[1])))
                    .sum()
            }
        }
    }

    fn is_monotone(&self, a: f64, b: f64) -> bool {
        const SAMPLES: usize = 256;
        let vals: Vec<f64> = (0..=SAMPLES).map(|i| self.eval(a + (b - a) * i as f64 / SAMPLES as f64)).collect();
        vals.windows(2).all(|w| w[1] >= w[0]) || vals.windows(2).all(|w| w[1] <= w[0])
    }
}

fn pchip_end(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

fn segment(x: &[f64], t: f64) -> usize {
    let n = x.len();
    match x.iter().rposition(|&k| k <= t) {
        None => 0,
        Some(i) => i.min(n - 2),
    }
}

fn cubic_fit(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    // Centre and scale the abscissa for conditioning, then map back.
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let scale = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(x.len(), 4, |r, c| ((x[r] - mean) / scale).powi(c as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let u = svd.solve(&b, 1e-12).map_err(|e| Error::Other(format!("cubic fit failed: {e}")))?;
    let (m, s) = (mean, scale);
    let q = [u[0], u[1] / s, u[2] / (s * s), u[3] / (s * s * s)];
    // Expand q0 + q1 (t-m) + q2 (t-m)^2 + q3 (t-m)^3.
    Ok([
        q[0] - q[1] * m + q[2] * m * m - q[3] * m * m * m,
        q[1] - 2.0 * q[2] * m + 3.0 * q[3] * m * m,
        q[2] - 3.0 * q[3] * m,
        q[3],
    ])
}

/// `(log10 bpp, quality)` of a curve, sorted by rate.
fn curve_samples(points: &[RdPoint], quality: fn(&RdPoint) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < BD_MIN_POINTS {
        return Err(Error::Param(format!("need at least {BD_MIN_POINTS} points, got {}", points.len())));
    }
    let mut p: Vec<(f64, f64)> = points.iter().map(|p| (p.bpp_avg(), quality(p))).collect();
    if p.iter().any(|&(r, q)| !(r > 0.0) || !q.is_finite()) {
        return Err(Error::Param("rates must be positive and qualities finite".into()));
    }
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(p.into_iter().map(|(r, q)| (r.log10(), q)).unzip())
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let range = |v: &[f64]| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (ra, rb) = (range(a), range(b));
    let (lo, hi) = (ra.0.max(rb.0), ra.1.min(rb.1));
    if !(hi > lo) {
        return Err(Error::Overlap { reference: ra, test: rb });
    }
    Ok((lo, hi))
}

/// Sorts `(x, y)` samples by `x`.
fn sorted_by_x(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    p.into_iter().unzip()
}

/// Fits used for the rate delta: log10 rate as a function of quality, and the
/// common quality interval.
pub fn bd_rate_fits(reference: &[RdPoint], test: &[RdPoint], quality: fn(&RdPoint) -> f64) -> Result<(Fit, Fit, f64, f64)> {
    let (rr, qr) = curve_samples(reference, quality)?;
    let (rt, qt) = curve_samples(test, quality)?;
    let (lo, hi) = overlap(&qr, &qt)?;
    let (qr, rr) = sorted_by_x(&qr, &rr);
    let (qt, rt) = sorted_by_x(&qt, &rt);
    Ok((Fit::new(&qr, &rr)?, Fit::new(&qt, &rt)?, lo, hi))
}

/// Fits used for the quality delta: quality as a function of log10 rate, and
/// the common log-rate interval.
pub fn bd_quality_fits(reference: &[RdPoint], test: &[RdPoint], quality: fn(&RdPoint) -> f64) -> Result<(Fit, Fit, f64, f64)> {
    let (rr, qr) = curve_samples(reference, quality)?;
    let (rt, qt) = curve_samples(test, quality)?;
    let (lo, hi) = overlap(&rr, &rt)?;
    Ok((Fit::new(&rr, &qr)?, Fit::new(&rt, &qt)?, lo, hi))
}

/// Average rate difference in percent at equal quality; negative means the
/// test curve needs fewer bits.
pub fn bd_rate_with(reference: &[RdPoint], test: &[RdPoint], quality: fn(&RdPoint) -> f64) -> Result<f64> {
    let (fr, ft, lo, hi) = bd_rate_fits(reference, test, quality)?;
    let diff = (ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// Average quality difference at equal rate; positive means the test curve is better.
pub fn bd_quality_with(reference: &[RdPoint], test: &[RdPoint], quality: fn(&RdPoint) -> f64) -> Result<f64> {
    let (fr, ft, lo, hi) = bd_quality_fits(reference, test, quality)?;
    Ok((ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo))
}

pub fn bd_rate(reference: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    bd_rate_with(reference, test, RdPoint::psnr_avg)
}

pub fn bd_psnr(reference: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    bd_quality_with(reference, test, RdPoint::psnr_avg)
}

/// Per view map of estimated latent bits at each latent position.
#[derive(Clone, Debug, PartialEq)]
pub struct BitMap {
    pub height: usize,
    pub width: usize,
    /// Row-major bits per position, per view.
    pub bits: [Vec<f64>; 2],
}

impl BitMap {
    pub fn total(&self) -> f64 {
        self.bits.iter().flatten().sum()
    }

    /// Grayscale rendering upsampled by `scale`; darker pixels carry more bits.
    /// Both views share one intensity scale.
    pub fn to_gray(&self, view: usize, scale: usize) -> image::GrayImage {
        let max = self.bits.iter().flatten().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        image::GrayImage::from_fn((self.width * scale) as u32, (self.height * scale) as u32, |x, y| {
            let b = self.bits[view][(y as usize / scale) * self.width + x as usize / scale];
            image::Luma([(255.0 * (1.0 - b / max)).round().clamp(0.0, 255.0) as u8])
        })
    }
}

/// Sum over channels of `-log2 p(ŷ)` at every latent position, from a rounded
/// forward pass.
pub fn bit_allocation_map(model: &Model, pair: &StereoPair) -> Result<BitMap> {
    model.check_input(pair.height(), pair.width())?;
    let g = Graph::<f64>::inference();
    let params = model.params_as::<f64>();
    let cx = Ctx::new(&g, &params);
    let x = cx.constant(pairs_to_tensor(&[pair]).cast());
    let out = model.forward(&cx, x, &mut Quantizer::<rand_chacha::ChaCha8Rng>::Round);
    let bits = out.y_bits.value();
    let s = bits.shape().to_vec();
    let (c, h, w) = (s[1], s[3], s[4]);
    debug_assert_eq!((h, w), (pair.height() / LATENT_STRIDE, pair.width() / LATENT_STRIDE));
    let d = bits.data();
    let mut maps = [vec![0.0; h * w], vec![0.0; h * w]];
    for ch in 0..c {
        for (v, map) in maps.iter_mut().enumerate() {
            let base = (ch * 2 + v) * h * w;
            for (m, &b) in map.iter_mut().zip(&d[base..base + h * w]) {
                *m += b;
            }
        }
    }
    Ok(BitMap { height: h, width: w, bits: maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_lookup() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(segment(&x, -1.0), 0);
        assert_eq!(segment(&x, 1.5), 1);
        assert_eq!(segment(&x, 3.0), 2);
    }

    #[test]
    fn cubic_fit_recovers_polynomial() {
        let x = [0.1, 0.4, 0.8, 1.3, 2.0];
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t + 0.25 * t * t * t;
        let y: Vec<f64> = x.iter().map(|&t| f(t)).collect();
        let c = cubic_fit(&x, &y).unwrap();
        for (got, want) in c.iter().zip([1.0, -2.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-9, "{c:?}");
        }
    }

    #[test]
    fn pchip_interpolates_knots_monotonically() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 0.1, 2.0, 2.05, 5.0];
        let f = Fit::pchip(&x, &y);
        for (a, b) in x.iter().zip(&y) {
            assert!((f.eval(*a) - b).abs() < 1e-12);
        }
        assert!(f.is_monotone(0.0, 4.0));
    }
}
