//! Named parameter arrays and their binding into a computation graph.

use std::collections::BTreeMap;

use vocoguard_tape::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Master copy of every parameter, always in `f64`, keyed by path-like names
/// such as `artifact_encoder/resblock0/conv1/weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

/// Gradients for the parameters that received one.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.map.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Names under `prefix/`.
    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.map
            .keys()
            .filter(move |k| k.len() > prefix.len() && k.starts_with(prefix) && k.as_bytes()[prefix.len()] == b'/')
    }
}

/// A graph under construction together with lazily created leaves for the
/// parameters it touches. Only parameters that are actually used become
/// graph leaves, so untouched subsystems receive no gradient.
pub struct Binder<'a, T: Real> {
    pub g: Graph<T>,
    params: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.params
    }

    /// Leaf for parameter `name`. Non-trainable parameters enter as constants.
    ///
    /// Panics if the name does not exist; parameter names are fixed by the
    /// model definition, so a miss is a programming error.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let p = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"));
        let t = Tensor::from_f64(&p.shape, &p.data);
        let v = if p.trainable { self.g.param(t) } else { self.g.input(t) };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.input(t)
    }

    /// Names of parameters bound so far.
    pub fn bound(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Back-propagates from `loss` and returns the `f64` gradients of every
    /// bound trainable parameter that the loss depends on.
    pub fn grads(&self, loss: Var) -> ParamGrads {
        let mut grads = self.g.backward(loss);
        let mut out = ParamGrads::new();
        for (name, &v) in &self.vars {
            if !self.g.needs_grad(v) {
                continue;
            }
            if let Some(t) = grads.take(v) {
                out.insert(name.clone(), t.data().iter().map(|x| x.f64()).collect());
            }
        }
        out
    }
}
