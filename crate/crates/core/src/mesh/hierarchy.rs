//! Multi-resolution hierarchy for the decoder: repeated quadric-error
//! half-edge collapses, barycentric up-sampling tables and per-level spirals.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use super::spiral::{spiral_sequences, SpiralTable};
use super::{Mesh, MeshTopology};
use crate::error::{Error, Result};

/// Sparse matrix stored by rows; every row is a list of `(column, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if let Some((r, c)) = rows
            .iter()
            .enumerate()
            .find_map(|(r, row)| row.iter().find(|(c, _)| *c >= cols).map(|(c, _)| (r, *c)))
        {
            return Err(Error::Shape(format!("row {r} references column {c} of {cols}")));
        }
        Ok(SparseRows { cols, rows })
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn col_count(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(_, w)| w).sum()).collect()
    }

    pub fn transpose(&self) -> SparseRows {
        let mut rows = vec![Vec::new(); self.cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                rows[c].push((r, w));
            }
        }
        SparseRows {
            cols: self.rows.len(),
            rows,
        }
    }

    /// `self * x` where `x` is `col_count x channels`, row-major.
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols * channels);
        let mut out = vec![0.0; self.rows.len() * channels];
        for (r, row) in self.rows.iter().enumerate() {
            let dst = &mut out[r * channels..(r + 1) * channels];
            for &(c, w) in row {
                let src = &x[c * channels..(c + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// One resolution of the hierarchy. Level 0 is the input mesh.
#[derive(Clone, Debug)]
pub struct Level {
    pub topology: Arc<MeshTopology>,
    pub positions: Vec<[f64; 3]>,
    pub spiral: SpiralTable,
}

#[derive(Clone, Debug)]
pub struct SamplingHierarchy {
    levels: Vec<Level>,
    /// `down[i]` maps level `i` features to level `i + 1` (vertex selection).
    down: Vec<SparseRows>,
    /// `up[i]` maps level `i + 1` features to level `i` (barycentric).
    up: Vec<SparseRows>,
    factor: usize,
}

impl SamplingHierarchy {
    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Number of down-sampling steps.
    pub fn depth(&self) -> usize {
        self.up.len()
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.topology.vertex_count()).collect()
    }

    pub fn down(&self, level: usize) -> &SparseRows {
        &self.down[level]
    }

    pub fn up(&self, level: usize) -> &SparseRows {
        &self.up[level]
    }

    pub fn spiral(&self, level: usize) -> &SpiralTable {
        &self.levels[level].spiral
    }

    pub fn fine_topology(&self) -> &Arc<MeshTopology> {
        &self.levels[0].topology
    }

    /// Hash over every level's topology and spiral table, used to pair
    /// decoder checkpoints with the hierarchy they were trained on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.levels {
            h.update(l.topology.hash().as_bytes());
            h.update((l.spiral.length() as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Default spiral length per level: 12 at the finest level down to 9 at the
/// coarsest.
pub fn default_spiral_lengths(levels: usize) -> Vec<usize> {
    if levels == 0 {
        return vec![12];
    }
    (0..=levels)
        .map(|l| 12 - ((3 * l) as f64 / levels as f64).round() as usize)
        .collect()
}

/// Builds `levels` successive decimations of `reference`, each shrinking the
/// vertex count by `factor` (rounded up).
pub fn build_hierarchy(
    reference: &Mesh,
    levels: usize,
    factor: usize,
    spiral_lengths: Option<&[usize]>,
) -> Result<SamplingHierarchy> {
    if levels == 0 {
        return Err(Error::Hierarchy("need at least one level".into()));
    }
    if factor < 2 {
        return Err(Error::Hierarchy(format!("factor must be >= 2, got {factor}")));
    }
    let lengths = match spiral_lengths {
        Some(l) if l.len() != levels + 1 => {
            return Err(Error::Hierarchy(format!(
                "{} spiral lengths given for {} levels",
                l.len(),
                levels + 1
            )))
        }
        Some(l) => l.to_vec(),
        None => default_spiral_lengths(levels),
    };
    let mut sizes = vec![reference.vertex_count()];
    for _ in 0..levels {
        let next = sizes.last().unwrap().div_ceil(factor);
        sizes.push(next);
    }
    if *sizes.last().unwrap() < 4 {
        return Err(Error::Hierarchy(format!(
            "{} vertices cannot be reduced {levels} times by {factor} and keep >= 4 (sizes {sizes:?})",
            reference.vertex_count()
        )));
    }
    check_vertex_manifold(reference.topology())?;

    let mut out_levels = vec![Level {
        topology: reference.topology().clone(),
        positions: reference.positions().to_vec(),
        spiral: spiral_sequences(reference.topology(), lengths[0])?,
    }];
    let mut down = Vec::new();
    let mut up = Vec::new();
    for (l, &target) in sizes.iter().enumerate().skip(1) {
        let fine = &out_levels[l - 1];
        let (kept, triangles) = decimate(&fine.positions, fine.topology.triangles(), target)?;
        let positions: Vec<[f64; 3]> = kept.iter().map(|&i| fine.positions[i]).collect();
        let topology = Arc::new(MeshTopology::new(kept.len(), triangles)?);
        let spiral = spiral_sequences(&topology, lengths[l])?;
        down.push(SparseRows::new(
            fine.positions.len(),
            kept.iter().map(|&i| vec![(i, 1.0)]).collect(),
        )?);
        up.push(barycentric_upsampling(&fine.positions, &kept, &positions, topology.triangles())?);
        out_levels.push(Level {
            topology,
            positions,
            spiral,
        });
    }
    Ok(SamplingHierarchy {
        levels: out_levels,
        down,
        up,
        factor,
    })
}

fn check_vertex_manifold(topology: &MeshTopology) -> Result<()> {
    let n = topology.vertex_count();
    let mut incident = vec![Vec::new(); n];
    for (t, tri) in topology.triangles().iter().enumerate() {
        for &v in tri {
            incident[v].push(t);
        }
    }
    for v in 0..n {
        // walk the fan across shared edges; a manifold vertex has one fan
        let tris = &incident[v];
        let mut reached = BTreeSet::from([tris[0]]);
        let mut stack = vec![tris[0]];
        while let Some(t) = stack.pop() {
            let a = topology.triangles()[t];
            for &s in tris {
                if reached.contains(&s) {
                    continue;
                }
                let b = topology.triangles()[s];
                let shared = a.iter().filter(|x| **x != v && b.contains(x)).count();
                if shared > 0 {
                    reached.insert(s);
                    stack.push(s);
                }
            }
        }
        if reached.len() != tris.len() {
            return Err(Error::Hierarchy(format!("vertex {v} is non-manifold (multiple fans)")));
        }
    }
    Ok(())
}

type Quadric = [f64; 10];

fn plane_quadric(n: [f64; 3], d: f64, w: f64) -> Quadric {
    let p = [n[0], n[1], n[2], d];
    let mut q = [0.0; 10];
    let mut k = 0;
    for i in 0..4 {
        for j in i..4 {
            q[k] = w * p[i] * p[j];
            k += 1;
        }
    }
    q
}

fn quadric_eval(q: &Quadric, p: [f64; 3]) -> f64 {
    let x = [p[0], p[1], p[2], 1.0];
    let mut s = 0.0;
    let mut k = 0;
    for i in 0..4 {
        for j in i..4 {
            let f = if i == j { 1.0 } else { 2.0 };
            s += f * q[k] * x[i] * x[j];
            k += 1;
        }
    }
    s
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-300).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Debug)]
struct Candidate {
    cost: f64,
    remove: usize,
    keep: usize,
    stamps: (u32, u32),
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // BinaryHeap pops the maximum; the cheapest collapse (then the smallest
    // vertex indices) must compare greatest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.remove.min(other.keep).cmp(&self.remove.min(self.keep)))
            .then_with(|| other.remove.cmp(&self.remove))
            .then_with(|| other.keep.cmp(&self.keep))
    }
}

struct Decimator<'a> {
    pos: &'a [[f64; 3]],
    tris: Vec<[usize; 3]>,
    tri_alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    alive: Vec<bool>,
    quadric: Vec<Quadric>,
    stamp: Vec<u32>,
    boundary: Vec<bool>,
}

impl<'a> Decimator<'a> {
    fn new(pos: &'a [[f64; 3]], triangles: &[[usize; 3]]) -> Self {
        let n = pos.len();
        let mut incident = vec![Vec::new(); n];
        let mut quadric = vec![[0.0; 10]; n];
        let mut edge_count = std::collections::BTreeMap::<(usize, usize), (usize, usize)>::new();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                incident[v].push(t);
            }
            let nrm = cross(sub(pos[tri[1]], pos[tri[0]]), sub(pos[tri[2]], pos[tri[0]]));
            let area = 0.5 * dot(nrm, nrm).sqrt();
            if let Some(u) = normalize(nrm) {
                let q = plane_quadric(u, -dot(u, pos[tri[0]]), area);
                for &v in tri {
                    for (a, b) in quadric[v].iter_mut().zip(&q) {
                        *a += b;
                    }
                }
            }
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                let entry = edge_count.entry((a.min(b), a.max(b))).or_insert((0, t));
                entry.0 += 1;
            }
        }
        let mut boundary = vec![false; n];
        for (&(a, b), &(count, t)) in &edge_count {
            if count != 1 {
                continue;
            }
            boundary[a] = true;
            boundary[b] = true;
            // constraint plane through the boundary edge, perpendicular to its face
            let tri = triangles[t];
            let fnrm = cross(sub(pos[tri[1]], pos[tri[0]]), sub(pos[tri[2]], pos[tri[0]]));
            let edge = sub(pos[b], pos[a]);
            if let Some(u) = normalize(cross(edge, fnrm)) {
                let w = 10.0 * dot(edge, edge);
                let q = plane_quadric(u, -dot(u, pos[a]), w);
                for v in [a, b] {
                    for (x, y) in quadric[v].iter_mut().zip(&q) {
                        *x += y;
                    }
                }
            }
        }
        Decimator {
            pos,
            tris: triangles.to_vec(),
            tri_alive: vec![true; triangles.len()],
            incident,
            alive: vec![true; n],
            quadric,
            stamp: vec![0; n],
            boundary,
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        self.incident[v]
            .iter()
            .flat_map(|&t| self.tris[t])
            .filter(|&u| u != v)
            .collect()
    }

    fn candidate(&self, remove: usize, keep: usize) -> Candidate {
        let mut q = self.quadric[remove];
        for (a, b) in q.iter_mut().zip(&self.quadric[keep]) {
            *a += b;
        }
        Candidate {
            cost: quadric_eval(&q, self.pos[keep]).max(0.0),
            remove,
            keep,
            stamps: (self.stamp[remove], self.stamp[keep]),
        }
    }

    fn push_edges(&self, heap: &mut BinaryHeap<Candidate>, v: usize) {
        for w in self.neighbors(v) {
            heap.push(self.candidate(v, w));
            heap.push(self.candidate(w, v));
        }
    }

    fn collapse_allowed(&self, u: usize, v: usize) -> bool {
        let shared: Vec<usize> = self.incident[u]
            .iter()
            .copied()
            .filter(|t| self.tris[*t].contains(&v))
            .collect();
        if shared.is_empty() {
            return false;
        }
        let edge_is_boundary = shared.len() == 1;
        if self.boundary[u] && !edge_is_boundary {
            return false;
        }
        // link condition: common neighbors are exactly the apexes of the shared faces
        let apexes: BTreeSet<usize> = shared
            .iter()
            .flat_map(|&t| self.tris[t])
            .filter(|&x| x != u && x != v)
            .collect();
        let common: BTreeSet<usize> = self.neighbors(u).intersection(&self.neighbors(v)).copied().collect();
        if common != apexes {
            return false;
        }
        // the merged vertex must keep at least a triangle fan of three faces
        if self.incident[u].len() + self.incident[v].len() - 2 * shared.len() < 2 {
            return false;
        }
        // reject face flips and slivers
        for &t in &self.incident[u] {
            let tri = self.tris[t];
            if tri.contains(&v) {
                continue;
            }
            let p = tri.map(|x| self.pos[x]);
            let q = tri.map(|x| if x == u { self.pos[v] } else { self.pos[x] });
            let n0 = cross(sub(p[1], p[0]), sub(p[2], p[0]));
            let n1 = cross(sub(q[1], q[0]), sub(q[2], q[0]));
            if dot(n0, n1) <= 0.0 || dot(n1, n1).sqrt() < 1e-12 * dot(n0, n0).sqrt() {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, u: usize, v: usize) {
        let tris_u = std::mem::take(&mut self.incident[u]);
        for t in tris_u {
            if self.tris[t].contains(&v) {
                self.tri_alive[t] = false;
                for x in self.tris[t] {
                    if x != u {
                        self.incident[x].retain(|&s| s != t);
                    }
                }
            } else {
                for x in self.tris[t].iter_mut() {
                    if *x == u {
                        *x = v;
                    }
                }
                self.incident[v].push(t);
            }
        }
        self.incident[v].sort_unstable();
        self.alive[u] = false;
        let qu = self.quadric[u];
        for (a, b) in self.quadric[v].iter_mut().zip(&qu) {
            *a += b;
        }
        self.stamp[u] += 1;
        self.stamp[v] += 1;
    }
}

/// Collapses edges until `target` vertices remain. Returns the kept vertex
/// indices in ascending order and the re-indexed triangles.
fn decimate(pos: &[[f64; 3]], triangles: &[[usize; 3]], target: usize) -> Result<(Vec<usize>, Vec<[usize; 3]>)> {
    let mut dec = Decimator::new(pos, triangles);
    let mut remaining = pos.len();
    let mut heap = BinaryHeap::new();
    let mut stalled_rounds = 0;
    while remaining > target {
        if heap.is_empty() {
            if stalled_rounds > 1 {
                return Err(Error::Hierarchy(format!(
                    "decimation stalled at {remaining} vertices (target {target})"
                )));
            }
            stalled_rounds += 1;
            for v in 0..pos.len() {
                if dec.alive[v] {
                    dec.push_edges(&mut heap, v);
                }
            }
            continue;
        }
        let c = heap.pop().unwrap();
        let (u, v) = (c.remove, c.keep);
        if !dec.alive[u] || !dec.alive[v] || c.stamps != (dec.stamp[u], dec.stamp[v]) {
            continue;
        }
        if !dec.collapse_allowed(u, v) {
            continue;
        }
        dec.collapse(u, v);
        remaining -= 1;
        stalled_rounds = 0;
        dec.push_edges(&mut heap, v);
    }
    let kept: Vec<usize> = (0..pos.len()).filter(|&v| dec.alive[v]).collect();
    let mut remap = vec![usize::MAX; pos.len()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let tris = dec
        .tris
        .iter()
        .zip(&dec.tri_alive)
        .filter(|(_, a)| **a)
        .map(|(t, _)| t.map(|x| remap[x]))
        .collect();
    Ok((kept, tris))
}

/// Closest point on triangle `(a, b, c)` to `p`, as barycentric weights.
pub(crate) fn closest_barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    // Ericson, Real-Time Collision Detection, 5.1.5
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

fn barycentric_upsampling(
    fine: &[[f64; 3]],
    kept: &[usize],
    coarse: &[[f64; 3]],
    coarse_tris: &[[usize; 3]],
) -> Result<SparseRows> {
    let mut coarse_of = vec![usize::MAX; fine.len()];
    for (c, &f) in kept.iter().enumerate() {
        coarse_of[f] = c;
    }
    let rows = fine
        .iter()
        .enumerate()
        .map(|(f, &p)| {
            if coarse_of[f] != usize::MAX {
                return vec![(coarse_of[f], 1.0)];
            }
            let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
            for (t, tri) in coarse_tris.iter().enumerate() {
                let [a, b, c] = tri.map(|i| coarse[i]);
                let w = closest_barycentric(p, a, b, c);
                let q = [
                    w[0] * a[0] + w[1] * b[0] + w[2] * c[0],
                    w[0] * a[1] + w[1] * b[1] + w[2] * c[1],
                    w[0] * a[2] + w[1] * b[2] + w[2] * c[2],
                ];
                let d = dot(sub(p, q), sub(p, q));
                if d < best.0 {
                    best = (d, t, w);
                }
            }
            let tri = coarse_tris[best.1];
            let mut row: Vec<(usize, f64)> = (0..3)
                .filter(|&i| best.2[i] > 0.0)
                .map(|i| (tri[i], best.2[i]))
                .collect();
            let s: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|(_, w)| *w /= s);
            row
        })
        .collect();
    SparseRows::new(coarse.len(), rows)
}
