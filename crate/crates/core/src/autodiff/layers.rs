use std::sync::Arc;

use rand::Rng;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(fan_in, fan_out, data).unwrap()
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(&format!("{name}.w"), glorot_uniform(rng, fan_in, fan_out));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, params[self.w])?;
        g.add_row(h, params[self.b])
    }
}

/// Spiral convolution: each vertex concatenates the features along its
/// spiral and applies one shared linear map.
#[derive(Clone, Debug)]
pub struct SpiralConv {
    pub w: usize,
    pub b: usize,
    pub length: usize,
}

impl SpiralConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        length: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), glorot_uniform(rng, length * c_in, c_out));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, c_out));
        SpiralConv { w, b, length }
    }

    /// `x` stacks a batch of `V x c_in` feature blocks; `spiral` holds the
    /// matching batched indices (see [`batched_spiral`]).
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId, spiral: &Arc<Vec<usize>>) -> Result<NodeId> {
        let gathered = g.gather(x, spiral.clone(), self.length)?;
        let h = g.matmul(gathered, params[self.w])?;
        g.add_row(h, params[self.b])
    }
}

/// Repeats a `V x L` spiral table for `batch` stacked blocks.
pub fn batched_spiral(indices: &[usize], vertex_count: usize, batch: usize) -> Arc<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len() * batch);
    for b in 0..batch {
        out.extend(indices.iter().map(|&i| i + b * vertex_count));
    }
    Arc::new(out)
}
