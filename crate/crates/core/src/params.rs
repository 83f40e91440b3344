//! Named learnable tensors and their binding onto a tape.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Handle to one tensor of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named parameters. Names are hierarchical
/// dotted paths such as `stage1.block2.U`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of `name`, which must keep its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", &[slot.shape(), value.shape()]));
        }
        *slot = value;
        Ok(())
    }

    /// Hash of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Places every parameter on `tape`, as gradient leaves when `trainable`
    /// and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars given in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient of every parameter, in store order (zeros where unreached).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.add("a.w", Tensor::zeros(vec![2, 3])).unwrap();
        let b = s.add("a.b", Tensor::zeros(vec![3])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(vec![1])).is_err());
        assert_eq!(s.scalar_count(), 9);
        assert_eq!(s.id("a.b"), Some(b));
        assert_eq!(s.name(a), "a.w");
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.w", "a.b"]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::zeros(vec![2])).unwrap();
        let before = s.fingerprint();
        s.set("x", Tensor::from_vec(vec![0.0, 1e-300])).unwrap();
        assert_ne!(before, s.fingerprint());
        assert!(s.set("x", Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn bound_grads_follow_store_order() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = s.add("b", Tensor::from_vec(vec![3.0])).unwrap();
        let tape = Tape::new();
        let bound = s.bind(&tape, true);
        let y = bound[a].scale(2.0).sum().add(bound[b].square().sum()).unwrap();
        let g = bound.grads(&tape.backward(y).unwrap());
        assert_eq!(g[0].data(), &[2.0, 2.0]);
        assert_eq!(g[1].data(), &[6.0]);
    }
}
