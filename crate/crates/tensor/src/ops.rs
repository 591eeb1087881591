//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::conv::{
    channel_sum, conv3d_backward_input, conv3d_backward_weight, conv3d_forward, conv_transpose3d_forward, ConvGeom,
};
use crate::float::{gemm, std_normal_cdf, std_normal_pdf, Float, MatRef};
use crate::graph::Var;
use crate::tensor::{broadcast_shape, broadcast_to, broadcast_zip, Tensor};

/// Smallest probability a rate term may assign to a symbol.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;

fn zip3<T: Float>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    assert_eq!(a.shape(), c.shape());
    let data = a.data().iter().zip(b.data()).zip(c.data()).map(|((&x, &y), &z)| f(x, y, z)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batched matrix product over the trailing two axes; leading axes must match.
/// `ta`/`tb` transpose the corresponding operand.
pub fn bmm<T: Float>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(sa.len() >= 2 && sa.len() == sb.len(), "matmul rank mismatch {:?} x {:?}", sa, sb);
    let nd = sa.len();
    assert_eq!(sa[..nd - 2], sb[..nd - 2], "matmul batch mismatch {:?} x {:?}", sa, sb);
    let (ar, ac) = (sa[nd - 2], sa[nd - 1]);
    let (br, bc) = (sb[nd - 2], sb[nd - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims differ: {:?}{} x {:?}{}", sa, if ta { "^T" } else { "" }, sb, if tb { "^T" } else { "" });
    let batch: usize = sa[..nd - 2].iter().product();
    let mut shape = sa[..nd - 2].to_vec();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(&shape);
    for bi in 0..batch {
        let am = if ta { MatRef::col_major(bi * ar * ac, ac) } else { MatRef::row_major(bi * ar * ac, ac) };
        let bm = if tb { MatRef::col_major(bi * br * bc, bc) } else { MatRef::row_major(bi * br * bc, bc) };
        gemm(m, k, n, T::one(), a.data(), am, b.data(), bm, T::zero(), out.data_mut(), MatRef::row_major(bi * m * n, n));
    }
    out
}

fn softmax_tensor<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let d = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..d {
                mx = mx.max(data[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..d {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..d {
                data[base + j * inner] *= inv;
            }
        }
    }
    out
}

fn softmax_backward<T: Float>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = y.shape();
    let outer: usize = s[..axis].iter().product();
    let d = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Tensor::zeros(s);
    let (yd, gd) = (y.data(), g.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut dot = T::zero();
            for j in 0..d {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..d {
                let q = base + j * inner;
                od[q] = yd[q] * (gd[q] - dot);
            }
        }
    }
    out
}

impl<'g, T: Float> Var<'g, T> {
    /// Elementwise op given as value and derivative `df(x, y)`.
    fn elementwise(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.record_rc(
            y,
            &[self],
            Box::new(move |g| vec![Some(zip3(g, &x, &yc, |g, x, y| g * df(x, y)))]),
        )
    }

    fn check_rank(&self, other: &Var<'g, T>, op: &str) -> (Rc<Tensor<T>>, Rc<Tensor<T>>) {
        let (a, b) = (self.value(), other.value());
        assert!(
            broadcast_shape(a.shape(), b.shape()).is_some(),
            "{op}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        (a, b)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.check_rank(&other, "add");
        let y = broadcast_zip(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(y, &[self, other], Box::new(move |g| vec![Some(g.reduce_to(&sa)), Some(g.reduce_to(&sb))]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.check_rank(&other, "sub");
        let y = broadcast_zip(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(
            y,
            &[self, other],
            Box::new(move |g| vec![Some(g.reduce_to(&sa)), Some(g.reduce_to(&sb).map(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.check_rank(&other, "mul");
        let y = broadcast_zip(&a, &b, |x, y| x * y);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph.record(
            y,
            &[self, other],
            Box::new(move |g| {
                let ga = ra.then(|| broadcast_zip(g, &b, |g, b| g * b).reduce_to(a.shape()));
                let gb = rb.then(|| broadcast_zip(g, &a, |g, a| g * a).reduce_to(b.shape()));
                vec![ga, gb]
            }),
        )
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.check_rank(&other, "div");
        let y = Rc::new(broadcast_zip(&a, &b, |x, y| x / y));
        let yc = y.clone();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph.record_rc(
            y,
            &[self, other],
            Box::new(move |g| {
                let ga = ra.then(|| broadcast_zip(g, &b, |g, b| g / b).reduce_to(a.shape()));
                let gb = rb.then(|| {
                    let gy = g.zip_map(&yc, |g, y| g * y);
                    broadcast_zip(&gy, &b, |gy, b| -gy / b).reduce_to(b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let y = self.value().map(|v| v * c);
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let y = self.value().map(|v| v + c);
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(g.clone())]))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.elementwise(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.elementwise(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.elementwise(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.elementwise(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.elementwise(|x| T::of(stable_sigmoid(x.f64())), |_, y| y * (T::one() - y))
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.elementwise(|x| T::of(stable_softplus(x.f64())), |x, _| T::of(stable_sigmoid(x.f64())))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.elementwise(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::of(slope);
        self.elementwise(move |x| if x > T::zero() { x } else { x * s }, move |x, _| if x > T::zero() { T::one() } else { s })
    }

    pub fn abs(self) -> Var<'g, T> {
        self.elementwise(|x| x.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    pub fn square(self) -> Var<'g, T> {
        self.elementwise(|x| x * x, |x, _| x + x)
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        let pt = T::of(p);
        self.elementwise(move |x| x.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
    }

    /// `max(x, bound)` whose gradient still flows below the bound when it
    /// pushes the value upward.
    pub fn lower_bound(self, bound: f64) -> Var<'g, T> {
        let b = T::of(bound);
        let x = self.value();
        let y = x.map(|v| v.max(b));
        self.graph.record(
            y,
            &[self],
            Box::new(move |g| {
                vec![Some(g.zip_map(&x, |g, x| if x >= b || g < T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums over `axes`, keeping them as length-1 dims.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.sum_keep(axes);
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(broadcast_to(g, &shape))]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(g.clone().reshape(&orig))]))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let y = self.value().permute(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(g.permute(&inv))]))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.narrow(axis, start, len);
        self.graph.record(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                gx.narrow_add_assign(axis, start, g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of zero vars");
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat(&refs, axis);
        let lens: Vec<usize> = vals.iter().map(|v| v.dim(axis)).collect();
        parts[0].graph.record(
            y,
            parts,
            Box::new(move |g| {
                let mut start = 0;
                lens.iter()
                    .map(|&l| {
                        let part = g.narrow(axis, start, l);
                        start += l;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    pub fn flip(self, axis: usize) -> Var<'g, T> {
        let y = self.value().flip(axis);
        self.graph.record(y, &[self], Box::new(move |g| vec![Some(g.flip(axis))]))
    }

    /// Batched matrix product over the trailing two axes.
    pub fn matmul(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let y = bmm(&a, ta, &b, tb);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.graph.record(
            y,
            &[self, other],
            Box::new(move |g| {
                let ga = ra.then(|| match (ta, tb) {
                    (false, false) => bmm(g, false, &b, true),
                    (true, false) => bmm(&b, false, g, true),
                    (false, true) => bmm(g, false, &b, false),
                    (true, true) => bmm(&b, true, g, true),
                });
                let gb = rb.then(|| match (ta, tb) {
                    (false, false) => bmm(&a, true, g, false),
                    (true, false) => bmm(&a, false, g, false),
                    (false, true) => bmm(g, true, &a, false),
                    (true, true) => bmm(g, true, &a, true),
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn softmax(self, axis: usize) -> Var<'g, T> {
        let y = Rc::new(softmax_tensor(&self.value(), axis));
        let yc = y.clone();
        self.graph.record_rc(y, &[self], Box::new(move |g| vec![Some(softmax_backward(&yc, g, axis))]))
    }

    /// Convolution with weight `[out, in, kd, kh, kw]` and optional bias `[out]`.
    pub fn conv3d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, geom: ConvGeom) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        let bv = bias.map(|b| b.value());
        let y = conv3d_forward(&x, &wv, bv.as_deref(), &geom);
        let in_dims = [x.dim(2), x.dim(3), x.dim(4)];
        let (rx, rw) = (self.requires_grad(), w.requires_grad());
        let mut parents = vec![self, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.record(
            y,
            &parents,
            Box::new(move |g| {
                let mut out = vec![
                    rx.then(|| conv3d_backward_input(g, &wv, &geom, in_dims)),
                    rw.then(|| conv3d_backward_weight(&x, g, &geom, wv.shape())),
                ];
                if has_bias {
                    out.push(Some(channel_sum(g)));
                }
                out
            }),
        )
    }

    /// Transposed convolution with weight `[in, out, kd, kh, kw]` and optional bias `[out]`.
    pub fn conv_transpose3d(
        self,
        w: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        geom: ConvGeom,
        output_padding: [usize; 3],
    ) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        let bv = bias.map(|b| b.value());
        let y = conv_transpose3d_forward(&x, &wv, bv.as_deref(), &geom, output_padding);
        let (rx, rw) = (self.requires_grad(), w.requires_grad());
        let mut parents = vec![self, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.record(
            y,
            &parents,
            Box::new(move |g| {
                let mut out = vec![
                    rx.then(|| conv3d_forward(g, &wv, None, &geom)),
                    rw.then(|| conv3d_backward_weight(g, &x, &geom, wv.shape())),
                ];
                if has_bias {
                    out.push(Some(channel_sum(g)));
                }
                out
            }),
        )
    }

    /// Bits spent on integer-valued `self` under a discretized Gaussian
    /// `N(mu, sigma^2)`: `-log2 max(P, floor)` per element, where `P` is the
    /// mass of the unit bin around the value.
    pub fn gaussian_rate(self, mu: Var<'g, T>, sigma: Var<'g, T>) -> Var<'g, T> {
        let (y, m, s) = (self.value(), mu.value(), sigma.value());
        assert_eq!(y.shape(), m.shape(), "gaussian_rate: mean shape mismatch");
        assert_eq!(y.shape(), s.shape(), "gaussian_rate: scale shape mismatch");
        let n = y.numel();
        let mut bits = Vec::with_capacity(n);
        // d bits / d (y - mu) and d bits / d sigma
        let mut d_dev = Vec::with_capacity(n);
        let mut d_sig = Vec::with_capacity(n);
        let ln2 = std::f64::consts::LN_2;
        for i in 0..n {
            let dev = y.data()[i].f64() - m.data()[i].f64();
            let sig = s.data()[i].f64();
            let v = dev.abs();
            let a = (0.5 - v) / sig;
            let b = (-0.5 - v) / sig;
            let p = std_normal_cdf(a) - std_normal_cdf(b);
            let pc = p.max(LIKELIHOOD_FLOOR);
            bits.push(T::of(-pc.ln() / ln2));
            let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
            let coef = -1.0 / (pc * ln2);
            let dp_dv = (pb - pa) / sig;
            let dp_ds = (pb * b - pa * a) / sig;
            let sign = if dev > 0.0 { 1.0 } else if dev < 0.0 { -1.0 } else { 0.0 };
            d_dev.push(T::of(coef * dp_dv * sign));
            d_sig.push(T::of(coef * dp_ds));
        }
        let shape = y.shape().to_vec();
        let out = Tensor::from_vec(&shape, bits);
        let (ry, rm) = (self.requires_grad(), mu.requires_grad());
        self.graph.record(
            out,
            &[self, mu, sigma],
            Box::new(move |g| {
                let gd: Vec<T> = g.data().iter().zip(&d_dev).map(|(&g, &d)| g * d).collect();
                let gs: Vec<T> = g.data().iter().zip(&d_sig).map(|(&g, &d)| g * d).collect();
                let gdt = Tensor::from_vec(&shape, gd);
                vec![
                    ry.then(|| gdt.clone()),
                    rm.then(|| gdt.map(|v| -v)),
                    Some(Tensor::from_vec(&shape, gs)),
                ]
            }),
        )
    }
}
