//! Central-difference verification of graph gradients.

use rand::Rng;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Overwrites every parameter with uniform values in [-1, 1).
pub fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for i in 0..store.len() {
        let t = store.get(i);
        let (r, c) = (t.rows(), t.cols());
        *store.get_mut(i) = Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape is preserved");
    }
}

/// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` over every parameter
/// entry, with central differences of step `h`.
pub fn relative_error<F>(store: &ParamStore, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let l = loss(&mut g, &p)?;
    let mut analytic = Vec::new();
    for id in g.grad_or_zeros(l, &p)? {
        analytic.extend_from_slice(g.value(id)?.data());
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let l = loss(&mut g, &p)?;
        g.scalar(l)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..store.len() {
        for j in 0..store.get(i).len() {
            let mut plus = store.clone();
            plus.get_mut(i).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(i).data_mut()[j] -= h;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-300))
}
