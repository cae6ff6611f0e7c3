//! Named parameter storage and per-graph binding.

use std::collections::HashMap;

use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Ordered list of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<(String, Tensor)> = self
            .names
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(n, _)| !n.starts_with(prefix))
            .collect();
        self.index.clear();
        for (n, t) in keep {
            self.insert(n, t);
        }
    }
}

/// Registers parameters in a graph on first use.
pub struct Binder<'a> {
    params: &'a ParamSet,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
        }
    }

    /// Graph handle for `name`.
    ///
    /// # Panics
    /// If the parameter does not exist; names are fixed by the model layout.
    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        *self.vars[i].get_or_insert_with(|| g.param(&self.params.tensors[i]))
    }

    /// Whether `name` was touched by the graph built so far.
    pub fn is_bound(&self, name: &str) -> bool {
        self.params.position(name).is_some_and(|i| self.vars[i].is_some())
    }

    /// One gradient per parameter, zeros for parameters never bound.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| match v {
                Some(v) => grads.get(*v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}
