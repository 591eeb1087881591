//! Reverse-mode automatic differentiation over a single-threaded tape.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::float::Float;
use crate::tensor::Tensor;

/// Maps the output gradient of a node to gradients of its parents (in order).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Tape of recorded operations. Create one per forward pass.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Float> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph<T>,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: Cell::new(true) }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        let g = Self::new();
        g.grad_enabled.set(false);
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that does not receive gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_node(Rc::new(t), false, Vec::new(), None)
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_node(t, false, Vec::new(), None)
    }

    /// Input that receives gradients (a trainable parameter or a probe).
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let rg = self.grad_enabled.get();
        self.push_node(Rc::new(t), rg, Vec::new(), None)
    }

    pub fn leaf_rc(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        let rg = self.grad_enabled.get();
        self.push_node(t, rg, Vec::new(), None)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::of(v)))
    }

    fn push_node(
        &self,
        value: Rc<Tensor<T>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents, backward });
        Var { id: nodes.len() - 1, graph: self }
    }

    /// Records an op result. The closure is dropped when no parent needs gradients.
    pub fn record(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        self.record_rc(Rc::new(value), parents, backward)
    }

    /// Like [`Graph::record`] for a value the backward closure also holds on to.
    pub fn record_rc(&self, value: Rc<Tensor<T>>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let needs = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if needs {
            self.push_node(value, true, parents.iter().map(|p| p.id).collect(), Some(backward))
        } else {
            self.push_node(value, false, Vec::new(), None)
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward requires a scalar loss");
        if !nodes[loss.id].requires_grad {
            return Grads { grads };
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for i in (0..n).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let pg = bw(&g);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }
}
