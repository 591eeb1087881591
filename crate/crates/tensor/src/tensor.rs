//! Dense row-major tensors and the layout kernels used by the autodiff ops.

use crate::float::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        let mut o = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of {:?}", self.shape);
            o = o * d + ix;
        }
        o
    }

    /// General axis permutation (materialized copy).
    pub fn permute(&self, axes: &[usize]) -> Self {
        let nd = self.ndim();
        assert_eq!(axes.len(), nd, "permute rank mismatch");
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Tensor { shape: out_shape, data: out };
        }
        // Iterate the output in order with a multi-index counter; innermost
        // axis handled as a strided run.
        let last = nd - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; nd];
        let mut base = 0usize;
        loop {
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
            // advance outer indices
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Tensor { shape: out_shape, data: out };
                }
                ax -= 1;
                idx[ax] += 1;
                base += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * d + start) * inner;
            out.extend_from_slice(&self.data[s..s + len * inner]);
        }
        Tensor { shape, data: out }
    }

    /// Adds `src` into the sub-range `[start, start + src.dim(axis))` along `axis`.
    pub fn narrow_add_assign(&mut self, axis: usize, start: usize, src: &Self) {
        let len = src.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        for o in 0..outer {
            let s = (o * d + start) * inner;
            let t = o * len * inner;
            for (a, &b) in self.data[s..s + len * inner].iter_mut().zip(&src.data[t..t + len * inner]) {
                *a += b;
            }
        }
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0];
        for p in parts {
            assert_eq!(p.ndim(), first.ndim(), "concat rank mismatch");
            for ax in 0..first.ndim() {
                if ax != axis {
                    assert_eq!(p.shape[ax], first.shape[ax], "concat shape mismatch on axis {ax}");
                }
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let run = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        Tensor { shape, data: out }
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&self, axis: usize) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut out = Vec::with_capacity(self.numel());
        for o in 0..outer {
            for i in (0..d).rev() {
                let s = (o * d + i) * inner;
                out.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }

    /// Sums over the given axes, keeping them as length-1 dims.
    pub fn sum_keep(&self, axes: &[usize]) -> Self {
        let mut shape = self.shape.clone();
        for &a in axes {
            shape[a] = 1;
        }
        let mut out = Tensor::zeros(&shape);
        let out_strides = strides(&shape);
        let red: Vec<usize> =
            (0..self.ndim()).map(|a| if shape[a] == 1 && self.shape[a] != 1 { 0 } else { out_strides[a] }).collect();
        accumulate_broadcast(&self.shape, &self.data, &red, &mut out.data);
        out
    }

    /// Reduces a broadcast gradient back to `target` shape.
    pub fn reduce_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        assert_eq!(self.ndim(), target.len(), "reduce_to rank mismatch");
        let axes: Vec<usize> = (0..target.len()).filter(|&a| target[a] == 1 && self.shape[a] != 1).collect();
        self.sum_keep(&axes)
    }
}

/// Adds `src` (full shape) into `dst` addressed by `dst_strides` (0 on reduced axes).
fn accumulate_broadcast<T: Float>(shape: &[usize], src: &[T], dst_strides: &[usize], dst: &mut [T]) {
    let nd = shape.len();
    if nd == 0 {
        dst[0] += src[0];
        return;
    }
    let last = nd - 1;
    let inner = shape[last];
    let ist = dst_strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut pos = 0usize;
    if src.is_empty() {
        return;
    }
    loop {
        if ist == 0 {
            let mut acc = T::zero();
            for j in 0..inner {
                acc += src[pos + j];
            }
            dst[base] += acc;
        } else {
            for j in 0..inner {
                dst[base + j * ist] += src[pos + j];
            }
        }
        pos += inner;
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += dst_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= dst_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Broadcast result shape of two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Elementwise binary op with numpy-style broadcasting (equal ranks).
pub fn broadcast_zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape);
    let sb = broadcast_strides(&b.shape);
    let n = numel(&shape);
    let nd = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a.data[ia], b.data[ib]));
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor { shape, data: out }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(s).map(|(&d, st)| if d == 1 { 0 } else { st }).collect()
}

/// Expands `t` to `shape` by repetition along its length-1 axes.
pub fn broadcast_to<T: Float>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape == shape {
        return t.clone();
    }
    let zero = Tensor::zeros(shape);
    broadcast_zip(&zero, t, |_, v| v)
}
