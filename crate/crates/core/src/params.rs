use std::collections::HashMap;

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tensor participates in optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrix; receives weight decay.
    Weight,
    /// Bias, norm scale/shift or learnable token; no weight decay.
    NoDecay,
    /// Fixed table (sine-cosine positions); stored and counted but never updated.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && !self.frozen
    }
}

/// Named parameter tensors in allocation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, kind, frozen: false, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over every allocated tensor, buffers included.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn element_count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => p.grad = Some(g.to_vec()),
        }
    }

    /// Copies every tensor whose name also exists in `other`; returns the number copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .find(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor named {}", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    frozen: p.frozen,
                    grad: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// A tape plus lazily bound parameter leaves.
///
/// When `track` is off every parameter enters the tape as a constant, so
/// backward only reaches explicitly watched activations.
pub struct Graph<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, track: bool) -> Self {
        Graph { tape: Tape::new(), store, vars: vec![None; store.len()], track }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), self.track && p.trainable());
        self.vars[id.0] = Some(v);
        v
    }

    /// Consumes the graph, returning the gradient of every bound trainable parameter.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<T>)> {
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.tape.take_grad(v)) {
                out.push((ParamId(i), g));
            }
        }
        out
    }
}

impl<T: Real> ParamStore<T> {
    pub fn accumulate_from(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for (id, g) in grads {
            self.accumulate_grad(id, &g);
        }
    }
}
