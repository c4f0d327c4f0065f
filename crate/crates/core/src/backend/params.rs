//! Named parameter storage for the toy backend.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter drawn from `N(0, scale^2)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut DetRng) -> ParamId {
        let t = rng::normal_tensor(rng, shape).scale(scale);
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn push(&mut self, name: &str, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::contract(alloc::format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), (own_name, own)) in entries.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(Error::contract(alloc::format!(
                    "checkpoint tensor {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.tensors = entries.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Places every parameter on `g`, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    pub fn fingerprint(&self) -> u64 {
        crate::tensor::fingerprint(&self.tensors)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
