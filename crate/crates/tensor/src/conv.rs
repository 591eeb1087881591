//! 3D convolution kernels (im2col + GEMM) over `[batch, channels, depth, height, width]`.
//!
//! The depth axis carries the stereo views, so it is short (usually 2) and
//! zero-padded. Each output depth slice only multiplies the kernel taps that
//! land inside the input; padded taps are skipped rather than multiplied by
//! zero-filled columns.
//!
//! Weights use the `[out, in, kd, kh, kw]` layout. Transposed convolutions
//! reuse these kernels through the adjoint relations
//! `convT(x) = conv_backward_input(x)` and `d convT / dx = conv_forward`.

use crate::float::{gemm, Float, MatRef};
use crate::tensor::Tensor;

/// Upper bound on the number of im2col elements materialized at once.
const CHUNK_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeom { kernel, stride, padding }
    }

    /// Output extent of a forward convolution, or `None` if the kernel does not fit.
    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extent of the transposed convolution with the given output padding.
    pub fn transposed_out_dims(&self, input: [usize; 3], output_padding: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 || output_padding[a] >= self.stride[a].max(1) {
                return None;
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a] + output_padding[a];
            out[a] = full.checked_sub(2 * self.padding[a])?;
        }
        // The forward convolution over `out` must land back on `input`.
        (self.out_dims(out)? == input).then_some(out)
    }
}

struct Plan {
    cin: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    geom: ConvGeom,
    block: usize,
    kfull: usize,
}

impl Plan {
    fn new(cin: usize, ind: [usize; 3], outd: [usize; 3], geom: ConvGeom) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let block = cin * kh * kw;
        Plan { cin, ind, outd, geom, block, kfull: kd * block }
    }

    fn in_vol(&self) -> usize {
        self.ind[0] * self.ind[1] * self.ind[2]
    }

    fn out_plane(&self) -> usize {
        self.outd[1] * self.outd[2]
    }

    fn out_vol(&self) -> usize {
        self.outd[0] * self.out_plane()
    }

    /// Valid depth-tap range `[lo, hi)` for output depth `d_o`.
    fn taps(&self, d_o: usize) -> (usize, usize) {
        let kd = self.geom.kernel[0];
        let start = (d_o * self.geom.stride[0]) as isize - self.geom.padding[0] as isize;
        let lo = (-start).max(0) as usize;
        let hi = ((self.ind[0] as isize - start).max(0) as usize).min(kd);
        (lo.min(hi), hi)
    }

    fn chunk(&self, kv: usize) -> usize {
        (CHUNK_ELEMS / kv.max(1)).clamp(1, self.out_plane().max(1))
    }
}

/// Walks the im2col rows of one (batch, output depth, position chunk) tile.
/// Rows are laid out `(tap, cin, ky, kx)` with `n = p1 - p0` columns each.
/// For every output-row segment of a row, `f(row_cells, line, lo, hi, ox0)` gets
/// the segment's cells, the input offset of the matching input line (`None`
/// when that line is padding) and the in-bounds output column range `lo..hi`.
#[inline]
fn for_each_segment<T>(
    plan: &Plan,
    d_o: usize,
    taps: (usize, usize),
    p0: usize,
    p1: usize,
    cols: &mut [T],
    mut f: impl FnMut(&mut [T], Option<usize>, usize, usize, usize, usize),
) {
    let [_, kh, kw] = plan.geom.kernel;
    let [sd, sh, sw] = plan.geom.stride;
    let [pd, ph, pw] = plan.geom.padding;
    let [_, h, w] = plan.ind;
    let wo = plan.outd[2];
    let n = p1 - p0;
    let mut row = 0usize;
    for t in taps.0..taps.1 {
        let di = d_o * sd + t - pd;
        for ci in 0..plan.cin {
            let chan_base = (ci * plan.ind[0] + di) * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    // output columns whose input column kx + ox*sw - pw lies inside [0, w)
                    let lo = if pw > kx { (pw - kx).div_ceil(sw) } else { 0 };
                    let hi = if w + pw > kx { ((w + pw - kx - 1) / sw + 1).min(wo) } else { 0 };
                    let hi = hi.max(lo);
                    let cells = &mut cols[row * n..(row + 1) * n];
                    let mut p = p0;
                    while p < p1 {
                        let oy = p / wo;
                        let ox0 = p % wo;
                        let ox1 = wo.min(ox0 + (p1 - p));
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let seg = &mut cells[p - p0..p - p0 + (ox1 - ox0)];
                        let line = (iy >= 0 && iy < h as isize).then(|| chan_base + iy as usize * w);
                        // input offset of output column ox is line + ox*sw + kx - pw
                        f(seg, line, lo.clamp(ox0, ox1), hi.clamp(ox0, ox1), ox0, kx);
                        p += ox1 - ox0;
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Float>(plan: &Plan, xb: &[T], d_o: usize, taps: (usize, usize), p0: usize, p1: usize, cols: &mut [T]) {
    let sw = plan.geom.stride[2];
    let pw = plan.geom.padding[2];
    for_each_segment(plan, d_o, taps, p0, p1, cols, |seg, line, lo, hi, ox0, kx| match line {
        None => seg.fill(T::zero()),
        Some(line) => {
            seg[..lo - ox0].fill(T::zero());
            seg[hi - ox0..].fill(T::zero());
            let dst = &mut seg[lo - ox0..hi - ox0];
            if dst.is_empty() {
                return;
            }
            let start = line + lo * sw + kx - pw;
            if sw == 1 {
                dst.copy_from_slice(&xb[start..start + dst.len()]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = xb[start + i * sw];
                }
            }
        }
    });
}

fn col2im<T: Float>(plan: &Plan, cols: &mut [T], d_o: usize, taps: (usize, usize), p0: usize, p1: usize, gxb: &mut [T]) {
    let sw = plan.geom.stride[2];
    let pw = plan.geom.padding[2];
    for_each_segment(plan, d_o, taps, p0, p1, cols, |seg, line, lo, hi, ox0, kx| {
        if let Some(line) = line {
            let src = &seg[lo - ox0..hi - ox0];
            if src.is_empty() {
                return;
            }
            let start = line + lo * sw + kx - pw;
            if sw == 1 {
                for (g, &v) in gxb[start..start + src.len()].iter_mut().zip(src) {
                    *g += v;
                }
            } else {
                for (i, &v) in src.iter().enumerate() {
                    gxb[start + i * sw] += v;
                }
            }
        }
    });
}

/// `[out, in, kd, kh, kw]` -> `[out, kd, in, kh, kw]` so each depth tap is a contiguous column block.
fn permute_weight<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.shape();
    w.clone().reshape(&[s[0], s[1], s[2], s[3] * s[4]]).permute(&[0, 2, 1, 3])
}

fn unpermute_weight<T: Float>(wp: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let s = shape;
    wp.reshape(&[s[0], s[2], s[1], s[3] * s[4]]).permute(&[0, 2, 1, 3]).reshape(shape)
}

fn dims5(t: &Tensor<impl Float>, what: &str) -> [usize; 5] {
    let s = t.shape();
    assert_eq!(s.len(), 5, "{what}: expected rank-5 tensor, got {:?}", s);
    [s[0], s[1], s[2], s[3], s[4]]
}

pub fn conv3d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: &ConvGeom) -> Tensor<T> {
    let [b, cin, d, h, wd] = dims5(x, "conv3d input");
    let [cout, wcin, kd, kh, kw] = dims5(w, "conv3d weight");
    assert_eq!(cin, wcin, "conv3d: input has {cin} channels, weight expects {wcin}");
    assert_eq!([kd, kh, kw], geom.kernel, "conv3d: weight kernel does not match geometry");
    let outd = geom
        .out_dims([d, h, wd])
        .unwrap_or_else(|| panic!("conv3d: kernel {:?} does not fit input {:?}", geom.kernel, [d, h, wd]));
    let plan = Plan::new(cin, [d, h, wd], outd, *geom);
    let wp = permute_weight(w);
    let mut out = Tensor::zeros(&[b, cout, outd[0], outd[1], outd[2]]);
    let (ov, oplane, iv) = (plan.out_vol(), plan.out_plane(), plan.in_vol());
    let mut cols: Vec<T> = Vec::new();
    for bi in 0..b {
        let xb = &x.data()[bi * cin * iv..(bi + 1) * cin * iv];
        for d_o in 0..outd[0] {
            let taps = plan.taps(d_o);
            let kv = (taps.1 - taps.0) * plan.block;
            if kv == 0 {
                continue;
            }
            let chunk = plan.chunk(kv);
            let mut p0 = 0;
            while p0 < oplane {
                let p1 = (p0 + chunk).min(oplane);
                let n = p1 - p0;
                cols.resize(kv * n, T::zero());
                im2col(&plan, xb, d_o, taps, p0, p1, &mut cols);
                gemm(
                    cout,
                    kv,
                    n,
                    T::one(),
                    wp.data(),
                    MatRef { offset: taps.0 * plan.block, rs: plan.kfull, cs: 1 },
                    &cols,
                    MatRef::row_major(0, n),
                    T::zero(),
                    out.data_mut(),
                    MatRef { offset: bi * cout * ov + d_o * oplane + p0, rs: ov, cs: 1 },
                );
                p0 = p1;
            }
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias);
    }
    out
}

/// Gradient of `conv3d_forward` with respect to its input.
pub fn conv3d_backward_input<T: Float>(gy: &Tensor<T>, w: &Tensor<T>, geom: &ConvGeom, in_dims: [usize; 3]) -> Tensor<T> {
    let [b, cout, od, oh, ow] = dims5(gy, "conv3d grad");
    let [wcout, cin, _, _, _] = dims5(w, "conv3d weight");
    assert_eq!(cout, wcout, "conv3d backward: channel mismatch");
    let outd = [od, oh, ow];
    assert_eq!(geom.out_dims(in_dims), Some(outd), "conv3d backward: geometry mismatch");
    let plan = Plan::new(cin, in_dims, outd, *geom);
    let wp = permute_weight(w);
    let mut gx = Tensor::zeros(&[b, cin, in_dims[0], in_dims[1], in_dims[2]]);
    let (ov, oplane, iv) = (plan.out_vol(), plan.out_plane(), plan.in_vol());
    let mut cols: Vec<T> = Vec::new();
    for bi in 0..b {
        for d_o in 0..od {
            let taps = plan.taps(d_o);
            let kv = (taps.1 - taps.0) * plan.block;
            if kv == 0 {
                continue;
            }
            let chunk = plan.chunk(kv);
            let mut p0 = 0;
            while p0 < oplane {
                let p1 = (p0 + chunk).min(oplane);
                let n = p1 - p0;
                cols.resize(kv * n, T::zero());
                gemm(
                    kv,
                    cout,
                    n,
                    T::one(),
                    wp.data(),
                    MatRef { offset: taps.0 * plan.block, rs: 1, cs: plan.kfull },
                    gy.data(),
                    MatRef { offset: bi * cout * ov + d_o * oplane + p0, rs: ov, cs: 1 },
                    T::zero(),
                    &mut cols,
                    MatRef::row_major(0, n),
                );
                let gxb = &mut gx.data_mut()[bi * cin * iv..(bi + 1) * cin * iv];
                col2im(&plan, &mut cols, d_o, taps, p0, p1, gxb);
                p0 = p1;
            }
        }
    }
    gx
}

/// Gradient of `conv3d_forward` with respect to its weight.
pub fn conv3d_backward_weight<T: Float>(x: &Tensor<T>, gy: &Tensor<T>, geom: &ConvGeom, w_shape: &[usize]) -> Tensor<T> {
    let [b, cin, d, h, wd] = dims5(x, "conv3d input");
    let [gb, cout, od, oh, ow] = dims5(gy, "conv3d grad");
    assert_eq!(b, gb, "conv3d backward: batch mismatch");
    let outd = [od, oh, ow];
    assert_eq!(geom.out_dims([d, h, wd]), Some(outd), "conv3d backward: geometry mismatch");
    let plan = Plan::new(cin, [d, h, wd], outd, *geom);
    let mut gwp = Tensor::zeros(&[cout, plan.kfull]);
    let (ov, oplane, iv) = (plan.out_vol(), plan.out_plane(), plan.in_vol());
    let mut cols: Vec<T> = Vec::new();
    for bi in 0..b {
        let xb = &x.data()[bi * cin * iv..(bi + 1) * cin * iv];
        for d_o in 0..od {
            let taps = plan.taps(d_o);
            let kv = (taps.1 - taps.0) * plan.block;
            if kv == 0 {
                continue;
            }
            let chunk = plan.chunk(kv);
            let mut p0 = 0;
            while p0 < oplane {
                let p1 = (p0 + chunk).min(oplane);
                let n = p1 - p0;
                cols.resize(kv * n, T::zero());
                im2col(&plan, xb, d_o, taps, p0, p1, &mut cols);
                gemm(
                    cout,
                    n,
                    kv,
                    T::one(),
                    gy.data(),
                    MatRef { offset: bi * cout * ov + d_o * oplane + p0, rs: ov, cs: 1 },
                    &cols,
                    MatRef { offset: 0, rs: 1, cs: n },
                    T::one(),
                    gwp.data_mut(),
                    MatRef { offset: taps.0 * plan.block, rs: plan.kfull, cs: 1 },
                );
                p0 = p1;
            }
        }
    }
    unpermute_weight(gwp, w_shape)
}

pub fn add_channel_bias<T: Float>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let s = out.shape().to_vec();
    let c = s[1];
    assert_eq!(bias.numel(), c, "bias length {} does not match {c} channels", bias.numel());
    let inner: usize = s[2..].iter().product();
    let bd = bias.data().to_vec();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let v = bd[i % c];
        for o in chunk {
            *o += v;
        }
    }
}

/// Per-channel sum over batch and spatial axes of a rank-5 gradient.
pub fn channel_sum<T: Float>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(inner).enumerate() {
        let mut acc = T::zero();
        for &v in chunk {
            acc += v;
        }
        out[i % c] += acc;
    }
    Tensor::from_vec(&[c], out)
}

/// Transposed convolution. `w` has layout `[in, out, kd, kh, kw]`.
pub fn conv_transpose3d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
    output_padding: [usize; 3],
) -> Tensor<T> {
    let [_, _, d, h, wd] = dims5(x, "conv_transpose3d input");
    let outd = geom
        .transposed_out_dims([d, h, wd], output_padding)
        .unwrap_or_else(|| panic!("conv_transpose3d: invalid geometry for input {:?}", [d, h, wd]));
    let mut y = conv3d_backward_input(x, w, geom, outd);
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}
