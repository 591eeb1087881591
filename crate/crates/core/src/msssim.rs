//! Multi-scale structural similarity for images in `[0, 1]`.
//!
//! Standard constants: Gaussian window of 11 taps with σ = 1.5, `C1 = 0.01²`,
//! `C2 = 0.03²`, and the five scale weights below. Small images use fewer
//! scales: with `s = min(H, W)` the count is 5 when `s ≥ 160`, otherwise
//! `1 + floor(log2(s / 16))` capped at 5, keeping the first weights
//! renormalized to sum to one. Sides under 16 are rejected.

use bisic_tensor::{ConvGeom, Float, Graph, Tensor, Var};

use crate::data::Image;
use crate::error::{Error, Result};

pub const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const MIN_SIDE: usize = 16;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Lower clamp applied to similarity terms before the weighted product.
const TERM_FLOOR: f64 = 1e-6;

pub fn scale_count(height: usize, width: usize) -> Result<usize> {
    let s = height.min(width);
    if s < MIN_SIDE {
        return Err(Error::TooSmall(format!("MS-SSIM needs sides of at least {MIN_SIDE}, got {height}x{width}")));
    }
    if s >= 160 {
        return Ok(5);
    }
    let mut n = 1;
    while n < 5 && s >> n >= MIN_SIDE {
        n += 1;
    }
    Ok(n)
}

/// Weights of the first `scales` scales, renormalized.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn gaussian_window<T: Float>(size: usize) -> Tensor<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn(&[1, 1, 1, size, size], |i| T::of(g[i / size] * g[i % size] / (s * s)))
}

/// MS-SSIM of `x` against `y`, both `[B, C, V, H, W]`, averaged over channels:
/// returns `[B, V]`.
pub fn ms_ssim_var<'g, T: Float>(g: &'g Graph<T>, x: Var<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s != y.shape() || s.len() != 5 {
        return Err(Error::Shape(format!("MS-SSIM inputs {s:?} and {:?}", y.shape())));
    }
    let (b, c, v) = (s[0], s[1], s[2]);
    let scales = scale_count(s[3], s[4])?;
    let weights = scale_weights(scales);
    let flat = [b * c * v, 1, 1, s[3], s[4]];
    let (mut xs, mut ys) = (x.reshape(&flat), y.reshape(&flat));
    let pool = g.constant(Tensor::full(&[1, 1, 1, 2, 2], T::of(0.25)));
    let pool_geom = ConvGeom::new([1, 2, 2], [1, 2, 2], [0, 0, 0]);
    let mut product: Option<Var<'g, T>> = None;
    for (i, &w) in weights.iter().enumerate() {
        let sh = xs.shape();
        let k = WINDOW.min(sh[3]).min(sh[4]);
        let win = g.constant(gaussian_window::<T>(k));
        let geom = ConvGeom::new([1, k, k], [1, 1, 1], [0, 0, 0]);
        let filt = |t: Var<'g, T>| t.conv3d(win, None, geom);
        let (mx, my) = (filt(xs), filt(ys));
        let (mxx, myy, mxy) = (mx.square(), my.square(), mx.mul(my));
        let sxx = filt(xs.square()).sub(mxx);
        let syy = filt(ys.square()).sub(myy);
        let sxy = filt(xs.mul(ys)).sub(mxy);
        let cs_map = sxy.scale(2.0).add_scalar(C2).div(sxx.add(syy).add_scalar(C2));
        let term_map = if i + 1 == scales {
            let lum = mxy.scale(2.0).add_scalar(C1).div(mxx.add(myy).add_scalar(C1));
            lum.mul(cs_map)
        } else {
            cs_map
        };
        let ts = term_map.shape();
        let term = term_map.sum_axes(&[3, 4]).scale(1.0 / (ts[3] * ts[4]) as f64);
        let term = term.lower_bound(TERM_FLOOR).powf(w);
        product = Some(match product {
            None => term,
            Some(p) => p.mul(term),
        });
        if i + 1 < scales {
            xs = xs.conv3d(pool, None, pool_geom);
            ys = ys.conv3d(pool, None, pool_geom);
        }
    }
    let per = product.unwrap().reshape(&[b, c, v]);
    Ok(per.sum_axes(&[1]).scale(1.0 / c as f64).reshape(&[b, v]))
}

/// MS-SSIM of two images in double precision.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    let g = Graph::<f64>::inference();
    let shape = [1, 3, 1, a.height, a.width];
    let ta = g.constant(Tensor::from_vec(&shape, a.data.iter().map(|&v| v as f64).collect()));
    let tb = g.constant(Tensor::from_vec(&shape, b.data.iter().map(|&v| v as f64).collect()));
    Ok(ms_ssim_var(&g, ta, tb)?.value().item())
}
