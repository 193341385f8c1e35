use std::collections::BTreeMap;

use super::{Graph, SplitMix64, Tensor, Var};
use crate::error::{Error, Result};
use crate::numerics::hash::Fnv1a;

/// Named parameter tensors, ordered by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed by the same paths as the [`ParamStore`] they belong to.
pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Normal init scaled by `std`.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut SplitMix64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    /// Copies every entry under `prefix/`.
    pub fn prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}/{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}/");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.input(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Hash over names and bit patterns of every value.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (k, v) in &self.tensors {
            h.write(k.as_bytes());
            h.write_u64(v.content_hash());
        }
        h.finish()
    }

    /// Same names and shapes.
    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Checks that `other` holds exactly our names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &self.tensors {
            match other.get(k) {
                None => return Err(Error::Format(format!("missing parameter {k}"))),
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::shape("parameter", v.shape(), o.shape()))
                }
                _ => {}
            }
        }
        if other.len() != self.len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Handles from `other` replace ours under the same name.
    pub fn overlay(mut self, other: &Bound) -> Bound {
        self.vars.extend(other.vars.iter().map(|(k, &v)| (k.clone(), v)));
        self
    }

    /// Handles under `prefix/`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Bound {
        let p = format!("{prefix}/");
        Bound {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, &v)| k.strip_prefix(&p).map(|s| (s.to_string(), v)))
                .collect(),
        }
    }

    /// Names bound here.
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Collects leaf gradients; unreached parameters get zeros.
    pub fn grads(&self, g: &Graph) -> Grads {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v)));
                (k.clone(), grad)
            })
            .collect()
    }
}

/// Elementwise `acc += other`; missing keys are inserted.
pub fn accumulate(acc: &mut Grads, other: Grads) {
    for (k, v) in other {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

pub fn scale_grads(grads: &mut Grads, s: f64) {
    for v in grads.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}
