//! Parameters, layer primitives and the per-pass binding of parameters to a graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use bisic_tensor::{ConvGeom, Float, Grads, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Slope of the leaky rectifier used between convolution stages.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Layers refer to entries by [`ParamId`], so the
/// same architecture can run with `f32` or `f64` parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Mutable access; copies the tensor only if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast::<U>())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// Seeded initializer that registers parameters while an architecture is built.
pub struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let b = bound as f32;
        let t = Tensor::from_fn(shape, |_| self.rng.gen_range(-b..=b));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Binds parameters of one store into one graph, creating each leaf on first use.
pub struct Ctx<'g, T: Float> {
    pub g: &'g Graph<T>,
    store: &'g ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, T: Float> Ctx<'g, T> {
    pub fn new(g: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Ctx { g, store, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let v = self.g.leaf_rc(self.store.rc(id));
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.g.constant(t)
    }

    /// Parameter gradients indexed by [`ParamId`]; `None` for unused parameters.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

pub fn leaky<'g, T: Float>(x: Var<'g, T>) -> Var<'g, T> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Convolution over `[B, C, V, H, W]` with an optional fixed weight mask.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    /// 0/1 weight mask with the weight's shape.
    pub mask: Option<Arc<Vec<f32>>>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        Self::new_masked(init, name, cin, cout, kernel, stride, padding, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_masked(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        tap_mask: Option<Vec<f32>>,
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        let taps = tap_mask.as_ref().map(|m| m.iter().filter(|&&v| v != 0.0).count()).unwrap_or(kvol);
        let bound = 1.0 / ((cin * taps.max(1)) as f64).sqrt();
        let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
        let w = init.uniform(&format!("{name}.weight"), &shape, bound);
        let b = init.uniform(&format!("{name}.bias"), &[cout], bound);
        let mask = tap_mask.map(|m| {
            assert_eq!(m.len(), kvol, "tap mask size");
            let full: Vec<f32> = (0..cout * cin).flat_map(|_| m.iter().copied()).collect();
            for &v in &m {
                assert!(v == 0.0 || v == 1.0);
            }
            Arc::new(full)
        });
        if let Some(m) = &mask {
            // keep stored weights consistent with the mask
            let wt = init.store.get_mut(w);
            for (x, &k) in wt.data_mut().iter_mut().zip(m.iter()) {
                *x *= k;
            }
        }
        Conv { w, b, geom: ConvGeom::new(kernel, stride, padding), mask, cin, cout }
    }

    /// 1×1×1 convolution.
    pub fn pointwise(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, cin, cout, [1, 1, 1], [1, 1, 1], [0, 0, 0])
    }

    pub fn weight<'g, T: Float>(&self, cx: &Ctx<'g, T>) -> Var<'g, T> {
        let w = cx.p(self.w);
        match &self.mask {
            Some(m) => {
                let shape = w.shape();
                let mt = Tensor::from_vec(&shape, m.iter().map(|&v| T::of(v as f64)).collect());
                w.mul(cx.constant(mt))
            }
            None => w,
        }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv3d(self.weight(cx), Some(cx.p(self.b)), self.geom)
    }
}

/// Transposed convolution; weight layout `[in, out, kd, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub output_padding: [usize; 3],
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Self {
        let kvol: usize = kernel.iter().product();
        let per_output = (kvol / (stride[0] * stride[1] * stride[2])).max(1);
        let bound = 1.0 / ((cin * per_output) as f64).sqrt();
        let w = init.uniform(&format!("{name}.weight"), &[cin, cout, kernel[0], kernel[1], kernel[2]], bound);
        let b = init.uniform(&format!("{name}.bias"), &[cout], bound);
        ConvT { w, b, geom: ConvGeom::new(kernel, stride, padding), output_padding }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose3d(cx.p(self.w), Some(cx.p(self.b)), self.geom, self.output_padding)
    }
}

/// Stack of 1×1 convolutions with leaky rectifiers between them.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub layers: Vec<Conv>,
}

impl Pointwise {
    pub fn new(init: &mut Init, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::pointwise(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Pointwise { layers }
    }

    pub fn forward<'g, T: Float>(&self, cx: &Ctx<'g, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(cx, x);
            if i + 1 < n {
                x = leaky(x);
            }
        }
        x
    }
}

/// Spatial stride-2 geometry shared by the analysis and synthesis stages.
pub fn down_geom(kd: usize, k: usize) -> ([usize; 3], [usize; 3], [usize; 3]) {
    ([kd, k, k], [1, 2, 2], [kd / 2, k / 2, k / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_conv_keeps_masked_taps_zero() {
        let mut store = ParamStore::default();
        let mut init = Init::new(&mut store, 1);
        let mut mask = vec![1.0f32; 9];
        mask[4] = 0.0;
        let c = Conv::new_masked(&mut init, "c", 2, 3, [1, 3, 3], [1, 1, 1], [0, 1, 1], Some(mask));
        let w = store.get(c.w);
        for o in 0..3 {
            for i in 0..2 {
                assert_eq!(w.at(&[o, i, 0, 1, 1]), 0.0);
            }
        }
    }

    #[test]
    fn ctx_binds_each_parameter_once() {
        let mut store = ParamStore::default();
        let mut init = Init::new(&mut store, 2);
        let c = Conv::pointwise(&mut init, "p", 2, 2);
        let g = Graph::<f32>::new();
        let cx = Ctx::new(&g, &store);
        assert_eq!(cx.p(c.w).id(), cx.p(c.w).id());
    }
}
