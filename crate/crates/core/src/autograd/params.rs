use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::tensor::Tensor;

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<E>>>,
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub(crate) fn snapshot(&self) -> Vec<Arc<Tensor<E>>> {
        self.values.clone()
    }
}

/// Seeded initializer that registers parameters under a dotted name prefix.
pub struct Init<'a, E> {
    pub store: &'a mut ParamStore<E>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, E: Real> Init<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with the name prefix extended by `name`.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<E>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| E::of(dist.sample(self.rng)))
            .collect();
        self.tensor(name, Tensor::new(shape, data))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| E::of(self.rng.random_range(lo..hi)))
            .collect();
        self.tensor(name, Tensor::new(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, E::of(v)))
    }
}
