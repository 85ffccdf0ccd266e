//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::collections::HashMap;
use std::ops::Index;

use crate::autodiff::{Gradients, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{numel, Dims, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. Order is significant: it fixes the
/// tape layout, the optimizer sweep and the checkpoint manifest.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter name {name:?}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = self.values[id.0].dims();
        if value.dims() != old {
            return Err(Error::Shape(format!(
                "parameter {}: {:?} cannot replace {old:?}",
                self.names[id.0],
                value.dims()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// A [`ParamStore`] bound to a tape, indexable by [`ParamId`].
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Element> Bound<'t, T> {
    /// Gradient of every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| match grads.get(*v) {
                Some(g) => Ok(g.clone()),
                None => Tensor::zeros(v.dims()),
            })
            .collect()
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

/// Normal init with standard deviation `gain / sqrt(fan_in)`.
pub fn scaled_normal<T: Element>(dims: Dims, fan_in: usize, gain: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    numel(dims)?;
    Tensor::normal(dims, 0.0, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_and_lookup() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::zeros([1, 1, 1, 2]).unwrap()).unwrap();
        let b = store.add("b", Tensor::ones([1, 1, 1, 1]).unwrap()).unwrap();
        assert_eq!(store.id_of("b"), Some(b));
        assert_eq!(store.name(a), "a");
        assert!(store.add("a", Tensor::zeros([1, 1, 1, 1]).unwrap()).is_err());
        assert!(store.set(a, Tensor::zeros([1, 1, 1, 3]).unwrap()).is_err());
        assert_eq!(store.num_elements(), 3);
    }

    #[test]
    fn bound_gradients_cover_unused_params() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full([1, 1, 1, 2], 2.0).unwrap()).unwrap();
        store.add("unused", Tensor::zeros([1, 1, 1, 3]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let loss = p[a].mul(p[a]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let grads = p.gradients(&g).unwrap();
        assert_eq!(grads[0].data(), &[4.0, 4.0]);
        assert_eq!(grads[1].data(), &[0.0; 3]);
    }
}
