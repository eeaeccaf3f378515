//! Reverse-mode automatic differentiation over dense f64 matrices.

pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId, SparseTransfer};
pub use layers::{batched_spiral, glorot_uniform, Linear, SpiralConv};
pub use optim::Adam;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Replaces values from `(name, tensor)` pairs, requiring the same names
    /// and shapes as the current store.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, network has {}",
                tensors.len(),
                self.values.len()
            )));
        }
        for (i, (name, t)) in tensors.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(tensors) {
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}
