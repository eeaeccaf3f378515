use std::collections::{HashMap, HashSet};

use super::MeshTopology;
use crate::error::{Error, Result};

/// Fixed-length neighborhood orderings, one row of `length` vertex indices per
/// vertex, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpiralTable {
    length: usize,
    indices: Vec<usize>,
}

impl SpiralTable {
    pub fn from_rows(length: usize, indices: Vec<usize>) -> Result<Self> {
        if length == 0 || indices.len() % length != 0 {
            return Err(Error::Shape(format!(
                "{} spiral entries do not form rows of length {length}",
                indices.len()
            )));
        }
        Ok(SpiralTable { length, indices })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn vertex_count(&self) -> usize {
        self.indices.len() / self.length
    }

    pub fn row(&self, v: usize) -> &[usize] {
        &self.indices[v * self.length..(v + 1) * self.length]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Neighbors of every vertex in winding order (the order `a -> b` for each
/// incident triangle `(v, a, b)`), rotated to start at the smallest index.
pub(crate) fn ordered_rings(topology: &MeshTopology) -> Result<Vec<Vec<usize>>> {
    let n = topology.vertex_count();
    let mut next: Vec<HashMap<usize, usize>> = vec![HashMap::new(); n];
    for t in topology.triangles() {
        for i in 0..3 {
            next[t[i]].insert(t[(i + 1) % 3], t[(i + 2) % 3]);
        }
    }
    (0..n)
        .map(|v| {
            let nbrs = topology.neighbors(v);
            let start = *nbrs
                .first()
                .ok_or_else(|| Error::Topology(format!("vertex {v} is isolated")))?;
            let succ = &next[v];
            let mut ring = Vec::with_capacity(nbrs.len());
            let mut seen = HashSet::with_capacity(nbrs.len());
            let mut cur = start;
            loop {
                ring.push(cur);
                seen.insert(cur);
                match succ.get(&cur) {
                    Some(&nx) if !seen.contains(&nx) => cur = nx,
                    _ => break,
                }
            }
            if ring.len() < nbrs.len() {
                // open fan: continue from its first edge up to where we started
                let targets: HashSet<usize> = succ.values().copied().collect();
                let mut heads: Vec<usize> = succ.keys().filter(|a| !targets.contains(a)).copied().collect();
                heads.sort_unstable();
                for head in heads {
                    let mut cur = head;
                    while !seen.contains(&cur) {
                        ring.push(cur);
                        seen.insert(cur);
                        match succ.get(&cur) {
                            Some(&nx) => cur = nx,
                            None => break,
                        }
                    }
                }
                // anything still missing (non-manifold vertex) in index order
                for &u in nbrs {
                    if seen.insert(u) {
                        ring.push(u);
                    }
                }
            }
            Ok(ring)
        })
        .collect()
}

/// `[v, 1-ring, 2-ring, ...]` for every vertex, truncated to `length` and
/// padded at the tail with `v` itself.
pub fn spiral_sequences(topology: &MeshTopology, length: usize) -> Result<SpiralTable> {
    if length == 0 {
        return Err(Error::InvalidInput("spiral length must be positive".into()));
    }
    let rings = ordered_rings(topology)?;
    let n = topology.vertex_count();
    let mut indices = Vec::with_capacity(n * length);
    let mut visited = vec![usize::MAX; n];
    for v in 0..n {
        let mut seq = vec![v];
        visited[v] = v;
        let mut frontier = vec![v];
        while seq.len() < length && !frontier.is_empty() {
            let mut next = Vec::new();
            for &u in &frontier {
                for &w in &rings[u] {
                    if visited[w] != v {
                        visited[w] = v;
                        next.push(w);
                    }
                }
            }
            seq.extend_from_slice(&next);
            frontier = next;
        }
        seq.truncate(length);
        seq.resize(length, v);
        indices.extend_from_slice(&seq);
    }
    SpiralTable::from_rows(length, indices)
}
