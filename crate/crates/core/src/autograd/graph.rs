use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

pub(crate) type BackwardFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    value: Arc<Tensor<E>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Tape of one forward evaluation. Created per step, dropped after `backward`.
pub struct Graph<E: Real> {
    nodes: RefCell<Vec<Node<E>>>,
    params: Vec<Arc<Tensor<E>>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
    train: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, E: Real> {
    pub(crate) id: usize,
    pub(crate) g: &'g Graph<E>,
}

impl<E: Real> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<E: Real> Graph<E> {
    /// Graph whose parameters require gradients.
    pub fn train(store: &ParamStore<E>) -> Self {
        Self::build(store, true)
    }

    /// Graph that records no backward closures.
    pub fn inference(store: &ParamStore<E>) -> Self {
        Self::build(store, false)
    }

    /// Graph without parameters, for free-standing computations.
    pub fn detached(train: bool) -> Self {
        Self::build(&ParamStore::new(), train)
    }

    fn build(store: &ParamStore<E>, train: bool) -> Self {
        let params = store.snapshot();
        let n = params.len();
        Self {
            nodes: RefCell::new(Vec::new()),
            params,
            param_nodes: RefCell::new(vec![None; n]),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            id: nodes.len() - 1,
            g: self,
        }
    }

    /// Leaf value that never receives a gradient.
    pub fn constant(&self, t: Tensor<E>) -> Var<'_, E> {
        self.constant_arc(Arc::new(t))
    }

    pub fn constant_arc(&self, t: Arc<Tensor<E>>) -> Var<'_, E> {
        self.push_node(Node {
            value: t,
            parents: vec![],
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Leaf value whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&self, t: Tensor<E>) -> Var<'_, E> {
        self.push_node(Node {
            value: Arc::new(t),
            parents: vec![],
            backward: None,
            requires_grad: self.train,
            param: None,
        })
    }

    pub fn scalar(&self, v: f64) -> Var<'_, E> {
        self.constant(Tensor::scalar(E::of(v)))
    }

    /// Binds a stored parameter (once per graph).
    pub fn param(&self, id: ParamId) -> Var<'_, E> {
        if let Some(n) = self.param_nodes.borrow()[id.0] {
            return Var { id: n, g: self };
        }
        let v = self.push_node(Node {
            value: self.params[id.0].clone(),
            parents: vec![],
            backward: None,
            requires_grad: self.train,
            param: Some(id.0),
        });
        self.param_nodes.borrow_mut()[id.0] = Some(v.id);
        v
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0]
    }

    /// Records an op result. `backward` maps the output gradient to one optional gradient per parent.
    pub fn op(
        &self,
        parents: &[Var<'_, E>],
        value: Tensor<E>,
        backward: impl Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>> + 'static,
    ) -> Var<'_, E> {
        self.op_arc(parents, Arc::new(value), backward)
    }

    /// Like [`Graph::op`], for results the backward closure also captures.
    pub fn op_arc(
        &self,
        parents: &[Var<'_, E>],
        value: Arc<Tensor<E>>,
        backward: impl Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>> + 'static,
    ) -> Var<'_, E> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Node {
            value,
            parents: ids,
            backward: if requires { Some(Box::new(backward)) } else { None },
            requires_grad: requires,
            param: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<E>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Grads<E> {
        let seed = {
            let v = self.value_of(loss.id);
            assert_eq!(v.numel(), 1, "backward needs a scalar loss, got {:?}", v.shape());
            Tensor::full(v.shape(), E::one())
        };
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&self, out: Var<'_, E>, seed: Tensor<E>) -> Grads<E> {
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<E>>> = (0..=out.id).map(|_| None).collect();
        grads[out.id] = Some(seed);
        let mut params: Vec<Option<Tensor<E>>> = (0..self.params.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        for id in (0..=out.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let pgrads = bw(&grad);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    let parents = node.parents.clone();
                    for (p, pg) in parents.into_iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                    // Free the closure (and the activations it captures) once consumed.
                    node.backward = None;
                }
                None => {
                    if let Some(pi) = node.param {
                        params[pi] = Some(grad);
                    } else {
                        leaves.insert(id, grad);
                    }
                }
            }
        }
        Grads { params, leaves }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<E> {
    params: Vec<Option<Tensor<E>>>,
    leaves: HashMap<usize, Tensor<E>>,
}

impl<E: Real> Grads<E> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var<'_, E>) -> Option<&Tensor<E>> {
        self.leaves.get(&v.id)
    }

    pub fn params(&self) -> &[Option<Tensor<E>>] {
        &self.params
    }

    /// Adds `other` into `self` (gradient accumulation across samples).
    pub fn accumulate(&mut self, other: Grads<E>) {
        if self.params.len() < other.params.len() {
            self.params.resize_with(other.params.len(), || None);
        }
        for (a, b) in self.params.iter_mut().zip(other.params) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }

    pub fn empty(n_params: usize) -> Self {
        Self {
            params: (0..n_params).map(|_| None).collect(),
            leaves: HashMap::new(),
        }
    }

    pub fn scale(&mut self, s: E) {
        for g in self.params.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let f = v.f64();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl<'g, E: Real> Var<'g, E> {
    pub fn value(&self) -> Arc<Tensor<E>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.g
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires(self.id)
    }

    pub fn item(&self) -> E {
        self.value().item()
    }
}
