//! Fixed-topology meshes, displacement fields, landmark indexing and the
//! per-vertex quantities the decoder is trained and evaluated with.

mod hierarchy;
mod io;
mod metrics;
mod spiral;
mod weights;

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use self::hierarchy::{build_hierarchy, Level, SamplingHierarchy, SparseRows};
pub use self::io::{
    format_obj, parse_obj, parse_ply, load_mesh, read_landmark_indices, read_mesh, write_landmark_indices, write_obj,
    MeshData,
};
pub(crate) use self::metrics::mean_std;
pub use self::metrics::{
    cumulative_error_curve, displacement_l1, mean_pervertex_error, per_vertex_errors, weighted_point_l1,
};
pub use self::spiral::{spiral_sequences, SpiralTable};
pub use self::weights::{compute_vertex_weights, VertexWeightTable};

use crate::curve::LandmarkFrame;
use crate::error::{Error, Result};

/// Triangle connectivity shared by every mesh of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeshTopology {
    vertex_count: usize,
    triangles: Vec<[usize; 3]>,
    neighbors: Vec<Vec<usize>>,
}

impl MeshTopology {
    /// Validates index range, vertex coverage and edge manifoldness.
    pub fn new(vertex_count: usize, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::Topology("mesh has no vertices".into()));
        }
        let mut referenced = vec![false; vertex_count];
        let mut edge_use: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for (f, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= vertex_count {
                    return Err(Error::Topology(format!(
                        "triangle {f} references vertex {v}, mesh has {vertex_count}"
                    )));
                }
                referenced[v] = true;
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Topology(format!("triangle {f} repeats a vertex: {tri:?}")));
            }
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(Error::Topology(format!("vertex {v} is not referenced by any triangle")));
        }
        if let Some(((a, b), n)) = edge_use.iter().find(|(_, &n)| n > 2) {
            return Err(Error::Topology(format!("edge ({a}, {b}) is shared by {n} triangles")));
        }
        let mut neighbors = vec![Vec::new(); vertex_count];
        for &(a, b) in edge_use.keys() {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(MeshTopology {
            vertex_count,
            triangles,
            neighbors,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Sorted 1-ring of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// SHA-256 over the vertex count and triangle list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertex_count as u64).to_le_bytes());
        for t in &self.triangles {
            for &v in t {
                h.update((v as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn check_finite(values: &[[f64; 3]], what: &str) -> Result<()> {
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains a non-finite coordinate")));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("{what}: expected {expected} vertices, got {got}")));
    }
    Ok(())
}

/// Vertex positions over a shared topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    topology: Arc<MeshTopology>,
    positions: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn new(topology: Arc<MeshTopology>, positions: Vec<[f64; 3]>) -> Result<Self> {
        check_len(topology.vertex_count(), positions.len(), "mesh positions")?;
        check_finite(&positions, "mesh")?;
        Ok(Mesh { topology, positions })
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn same_topology(&self, other: &Mesh) -> Result<()> {
        if !Arc::ptr_eq(&self.topology, &other.topology) && *self.topology != *other.topology {
            return Err(Error::Shape("meshes do not share a topology".into()));
        }
        Ok(())
    }

    pub fn translated(&self, offset: [f64; 3]) -> Mesh {
        Mesh {
            topology: self.topology.clone(),
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    /// `self - base`, vertex by vertex.
    pub fn displacement_from(&self, base: &Mesh) -> Result<DisplacementField> {
        self.same_topology(base)?;
        DisplacementField::new(
            self.positions
                .iter()
                .zip(&base.positions)
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                .collect(),
        )
    }
}

/// Per-vertex 3D displacement of a full mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    values: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(values: Vec<[f64; 3]>) -> Result<Self> {
        check_finite(&values, "displacement field")?;
        Ok(DisplacementField { values })
    }

    pub fn zeros(n: usize) -> Self {
        DisplacementField {
            values: vec![[0.0; 3]; n],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape(format!("{} values is not a multiple of 3", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn negated(&self) -> Self {
        DisplacementField {
            values: self.values.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }

    pub fn restrict(&self, table: &LandmarkIndexTable) -> Result<SparseDisplacement> {
        table.check_range(self.values.len())?;
        SparseDisplacement::new(table.indices().iter().map(|&i| self.values[i]).collect())
    }
}

/// Displacement of the `k` landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDisplacement {
    values: Vec<[f64; 3]>,
}

impl SparseDisplacement {
    pub fn new(values: Vec<[f64; 3]>) -> Result<Self> {
        check_finite(&values, "sparse displacement")?;
        Ok(SparseDisplacement { values })
    }

    pub fn zeros(k: usize) -> Self {
        SparseDisplacement {
            values: vec![[0.0; 3]; k],
        }
    }

    /// `target - base` landmark by landmark.
    pub fn between(target: &LandmarkFrame, base: &LandmarkFrame) -> Result<Self> {
        base.check_k(target.k())?;
        Self::new(
            target
                .points()
                .iter()
                .zip(base.points())
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                .collect(),
        )
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Vertex indices of the `k` landmarks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkIndexTable {
    indices: Vec<usize>,
}

impl LandmarkIndexTable {
    pub fn new(indices: Vec<usize>, vertex_count: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Table("landmark table is empty".into()));
        }
        let table = LandmarkIndexTable { indices };
        table.check_range(vertex_count)?;
        let mut sorted = table.indices.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Table(format!("vertex {} is listed twice", w[0])));
        }
        Ok(table)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub(crate) fn check_range(&self, vertex_count: usize) -> Result<()> {
        if let Some(&i) = self.indices.iter().find(|&&i| i >= vertex_count) {
            return Err(Error::Table(format!(
                "landmark index {i} out of range for {vertex_count} vertices"
            )));
        }
        Ok(())
    }
}

/// `Z = S(I_z)`.
pub fn extract_landmarks(mesh: &Mesh, table: &LandmarkIndexTable) -> Result<LandmarkFrame> {
    table.check_range(mesh.vertex_count())?;
    LandmarkFrame::new(table.indices().iter().map(|&i| mesh.positions[i]).collect())
}

/// `S^e = S^n + D`.
pub fn apply_displacement(neutral: &Mesh, field: &DisplacementField) -> Result<Mesh> {
    check_len(neutral.vertex_count(), field.len(), "displacement field")?;
    Ok(Mesh {
        topology: neutral.topology.clone(),
        positions: neutral
            .positions
            .iter()
            .zip(&field.values)
            .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            .collect(),
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Regular triangulated `w x h` grid on the plane z = 0, unit spacing.
    /// Each quad is split along the same diagonal, so interior vertices have
    /// six neighbors.
    pub fn grid(w: usize, h: usize) -> Mesh {
        let mut tris = Vec::new();
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let a = y * w + x;
                let b = a + 1;
                let c = a + w;
                let d = c + 1;
                tris.push([a, b, d]);
                tris.push([a, d, c]);
            }
        }
        let topo = Arc::new(MeshTopology::new(w * h, tris).unwrap());
        let pos = (0..w * h).map(|i| [(i % w) as f64, (i / w) as f64, 0.0]).collect();
        Mesh::new(topo, pos).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::grid;
    use super::*;

    #[test]
    fn topology_validation() {
        assert!(MeshTopology::new(3, vec![[0, 1, 2]]).is_ok());
        assert!(matches!(MeshTopology::new(3, vec![[0, 1, 3]]), Err(Error::Topology(_))));
        assert!(matches!(MeshTopology::new(4, vec![[0, 1, 2]]), Err(Error::Topology(_))));
        let fan = vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]];
        assert!(matches!(MeshTopology::new(5, fan), Err(Error::Topology(_))));
    }

    #[test]
    fn topology_hash_is_stable() {
        let a = grid(4, 4);
        let b = grid(4, 4);
        assert_eq!(a.topology().hash(), b.topology().hash());
        assert_ne!(a.topology().hash(), grid(5, 4).topology().hash());
    }

    #[test]
    fn extraction_and_displacement() {
        let m = grid(4, 3);
        let table = LandmarkIndexTable::new(vec![5, 0, 11], 12).unwrap();
        let z = extract_landmarks(&m, &table).unwrap();
        assert_eq!(z.points(), &[m.positions()[5], m.positions()[0], m.positions()[11]]);

        let field = DisplacementField::new((0..12).map(|i| [i as f64, 0.5, -1.0]).collect()).unwrap();
        let moved = apply_displacement(&m, &field).unwrap();
        let z2 = extract_landmarks(&moved, &table).unwrap();
        let restricted = field.restrict(&table).unwrap();
        for ((a, b), d) in z2.points().iter().zip(z.points()).zip(restricted.values()) {
            for c in 0..3 {
                assert_eq!(a[c] - b[c], d[c]);
            }
        }
        let back = apply_displacement(&moved, &field.negated()).unwrap();
        assert_eq!(back, m);
        assert_eq!(apply_displacement(&m, &DisplacementField::zeros(12)).unwrap(), m);
        let gt = m.translated([1.0, 2.0, 3.0]);
        assert_eq!(apply_displacement(&m, &gt.displacement_from(&m).unwrap()).unwrap(), gt);
    }

    #[test]
    fn table_errors() {
        assert!(matches!(LandmarkIndexTable::new(vec![1, 1], 4), Err(Error::Table(_))));
        assert!(matches!(LandmarkIndexTable::new(vec![4], 4), Err(Error::Table(_))));
        let small = LandmarkIndexTable::new(vec![7], 8).unwrap();
        assert!(matches!(extract_landmarks(&grid(2, 2), &small), Err(Error::Table(_))));
    }

    #[test]
    fn displacement_shape_mismatch() {
        let m = grid(3, 3);
        assert!(matches!(
            apply_displacement(&m, &DisplacementField::zeros(4)),
            Err(Error::Shape(_))
        ));
    }
}
