use std::collections::HashMap;
use std::ops::Index;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = *self
            .by_name
            .get(name)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
        let slot = &mut self.params[id].tensor;
        if slot.shape() != tensor.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    /// Records every parameter on `graph`, as gradient leaves when `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.leaf(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients accumulated on a bound graph, zero-filled for unreached parameters.
    pub fn grads(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| match graph.grad(v) {
                Some(g) => g.clone(),
                None => {
                    Tensor::from_parts(p.tensor.shape().to_vec(), vec![T::zero(); p.tensor.len()])
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Graph variables for each parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
