use super::{LandmarkIndexTable, Mesh};
use crate::error::{Error, Result};

/// Per-vertex weights in `[0, 1]` for the weighted point loss.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexWeightTable {
    weights: Vec<f64>,
}

impl VertexWeightTable {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidInput(format!("vertex weight {w} outside [0, 1]")));
        }
        Ok(VertexWeightTable { weights })
    }

    pub fn uniform(n: usize) -> Self {
        VertexWeightTable { weights: vec![1.0; n] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Inverse distance to the closest landmark, divided by its maximum over the
/// non-landmark vertices. Landmark vertices (and any vertex sitting exactly
/// on a landmark) get weight 1.
pub fn compute_vertex_weights(neutral: &Mesh, table: &LandmarkIndexTable) -> Result<VertexWeightTable> {
    table.check_range(neutral.vertex_count())?;
    let positions = neutral.positions();
    let landmarks: Vec<[f64; 3]> = table.indices().iter().map(|&i| positions[i]).collect();
    let mut is_landmark = vec![false; positions.len()];
    for &i in table.indices() {
        is_landmark[i] = true;
    }

    let mut raw = vec![f64::NAN; positions.len()];
    let mut max_raw = 0.0f64;
    for (i, p) in positions.iter().enumerate() {
        if is_landmark[i] {
            continue;
        }
        let d2 = landmarks
            .iter()
            .map(|z| (0..3).map(|c| (p[c] - z[c]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if d2 == 0.0 {
            is_landmark[i] = true;
            continue;
        }
        raw[i] = 1.0 / d2.sqrt();
        max_raw = max_raw.max(raw[i]);
    }

    let weights = raw
        .iter()
        .zip(&is_landmark)
        .map(|(&r, &lm)| if lm { 1.0 } else { (r / max_raw).min(1.0) })
        .collect();
    VertexWeightTable::new(weights)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mesh::test_support::grid;
    use crate::mesh::MeshTopology;

    #[test]
    fn hand_computed_toy() {
        // landmark at the origin, other vertices at distances 1, 2 and 4
        let topo = Arc::new(MeshTopology::new(4, vec![[0, 1, 2], [0, 2, 3]]).unwrap());
        let mesh = Mesh::new(
            topo,
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 4.0]],
        )
        .unwrap();
        let table = LandmarkIndexTable::new(vec![0], 4).unwrap();
        let w = compute_vertex_weights(&mesh, &table).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn range_and_translation_invariance() {
        let mesh = grid(9, 7);
        let table = LandmarkIndexTable::new(vec![10, 31, 50], 63).unwrap();
        let w = compute_vertex_weights(&mesh, &table).unwrap();
        assert!(w.weights().iter().all(|x| (0.0..=1.0).contains(x)));
        for &i in table.indices() {
            assert_eq!(w.weights()[i], 1.0);
        }
        let moved = mesh.translated([13.0, -4.0, 2.5]);
        let w2 = compute_vertex_weights(&moved, &table).unwrap();
        for (a, b) in w.weights().iter().zip(w2.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_vertex_gets_landmark_weight() {
        let topo = Arc::new(MeshTopology::new(4, vec![[0, 1, 2], [0, 2, 3]]).unwrap());
        let mesh = Mesh::new(
            topo,
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 4.0]],
        )
        .unwrap();
        let table = LandmarkIndexTable::new(vec![0], 4).unwrap();
        let w = compute_vertex_weights(&mesh, &table).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0, 0.5]);
    }
}
