//! Named parameter collections and their binding into a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Ordered list of named tensors. Order is fixed at construction and defines
/// the layout used by optimizers and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Replace the tensor stored under `name`, keeping its position.
    pub fn replace(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Put every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect(),
        }
    }
}

/// The graph handles of a bound [`ParamSet`], in the set's order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform initialisation in `[-limit, limit]`.
pub fn uniform<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    limit: f64,
) -> Tensor<S> {
    Tensor::from_fn(rows, cols, |_, _| S::of(rng.random_range(-limit..=limit)))
}

/// Glorot/Xavier uniform bound for a `fan_in → fan_out` weight.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
