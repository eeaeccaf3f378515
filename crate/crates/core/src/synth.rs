//! Synthetic face corpus: parametric half-ellipsoid identities on a shared
//! grid topology, and expression sequences built from localized analytic
//! deformation atoms.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curve::{LandmarkFrame, LandmarkSequence};
use crate::decoder::{PairSource, TrainPair};
use crate::error::{Error, Result};
use crate::mesh::{
    apply_displacement, compute_vertex_weights, extract_landmarks, read_landmark_indices, read_mesh, write_landmark_indices, write_obj,
    DisplacementField, LandmarkIndexTable, Mesh, MeshTopology, VertexWeightTable,
};
use crate::rng;

pub const LANDMARK_COUNT: usize = 68;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthFaceSpec {
    /// Approximate vertex count; the grid side is `round(sqrt(target))`.
    pub target_vertices: usize,
    pub classes: usize,
    pub frames: usize,
    /// Standard deviation of the per-sequence extra atom weights.
    pub variation: f64,
}

impl Default for SynthFaceSpec {
    fn default() -> Self {
        SynthFaceSpec {
            target_vertices: 1500,
            classes: 6,
            frames: 30,
            variation: 0.08,
        }
    }
}

/// Shape parameters of one synthetic person (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub radii: [f64; 3],
    pub nose: f64,
    pub brow: f64,
    pub chin: f64,
    pub eye_depth: f64,
    pub cheek: f64,
}

impl Identity {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Identity {
            radii: [75.0 * r(0.9, 1.1), 100.0 * r(0.9, 1.1), 60.0 * r(0.9, 1.1)],
            nose: r(14.0, 22.0),
            brow: r(3.0, 7.0),
            chin: r(3.0, 8.0),
            eye_depth: r(4.0, 8.0),
            cheek: r(2.0, 6.0),
        }
    }

    /// The mean identity, used as the reference neutral for shared tables.
    pub fn template() -> Self {
        Identity {
            radii: [75.0, 100.0, 60.0],
            nose: 18.0,
            brow: 5.0,
            chin: 5.5,
            eye_depth: 6.0,
            cheek: 4.0,
        }
    }
}

const ATOMS: usize = 9;
const JAW: usize = 0;
const SMILE_L: usize = 1;
const SMILE_R: usize = 2;
const BROW_RAISE: usize = 3;
const BROW_FURROW: usize = 4;
const PUCKER: usize = 5;
const EYE_CLOSE: usize = 6;
const CHEEK: usize = 7;
const UPPER_LIP: usize = 8;

const CLASS_NAMES: [&str; 6] = ["open_mouth", "smile", "surprise", "anger", "kiss", "smirk"];

pub fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("class_{c:02}"), |s| s.to_string())
}

/// Atom weights of expression class `c` at its apex.
pub fn class_weights(c: usize) -> [f64; ATOMS] {
    let mut w = [0.0; ATOMS];
    let set: &[(usize, f64)] = match c {
        0 => &[(JAW, 1.0), (UPPER_LIP, 0.4)],
        1 => &[(SMILE_L, 1.0), (SMILE_R, 1.0), (CHEEK, 0.4), (EYE_CLOSE, 0.25)],
        2 => &[(BROW_RAISE, 1.0), (JAW, 0.6), (EYE_CLOSE, -0.3)],
        3 => &[(BROW_FURROW, 1.0), (UPPER_LIP, 0.6), (PUCKER, 0.3)],
        4 => &[(PUCKER, 1.0), (CHEEK, -0.3), (EYE_CLOSE, 0.3)],
        5 => &[(SMILE_L, 1.0), (BROW_RAISE, 0.4), (CHEEK, 0.3)],
        _ => {
            w[c % ATOMS] = 1.0;
            w[(3 * c + 1) % ATOMS] += 0.5;
            return w;
        }
    };
    for &(a, v) in set {
        w[a] = v;
    }
    w
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// `(1 - r^2)^2` inside the ellipse of radii `(ru, rv)` around `(cu, cv)`, else 0.
fn bump(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    let r2 = ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2);
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - r2).powi(2)
    }
}

fn gauss(a: f64, b: f64) -> f64 {
    (-(a * a + b * b) / 2.0).exp()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Shared topology, landmark placement and the analytic deformation model.
#[derive(Clone, Debug)]
pub struct SynthFace {
    spec: SynthFaceSpec,
    side: usize,
    uv: Vec<[f64; 2]>,
    topology: Arc<MeshTopology>,
    landmarks: LandmarkIndexTable,
}

const THETA_MAX: f64 = 1.1;
const PHI_MAX: f64 = 0.9;

fn landmark_uv() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..17 {
        let a = PI + PI * i as f64 / 16.0;
        pts.push([0.85 * a.cos(), -0.1 + 0.8 * a.sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let u = if side < 0.0 { -0.62 + 0.47 * t } else { 0.15 + 0.47 * t };
            let arch = 0.06 * (1.0 - (2.0 * t - 1.0).powi(2));
            pts.push([u, 0.42 + arch]);
        }
    }
    for i in 0..4 {
        pts.push([0.0, 0.3 - 0.1 * i as f64]);
    }
    for i in 0..5 {
        pts.push([-0.14 + 0.07 * i as f64, -0.12]);
    }
    for cu in [-0.35, 0.35] {
        for i in 0..6 {
            let a = PI - 2.0 * PI * i as f64 / 6.0;
            pts.push([cu + 0.13 * a.cos(), 0.25 + 0.06 * a.sin()]);
        }
    }
    for i in 0..12 {
        let a = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push([0.3 * a.cos(), -0.42 + 0.14 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push([0.18 * a.cos(), -0.42 + 0.06 * a.sin()]);
    }
    pts
}

impl SynthFace {
    /// Builds the grid topology and snaps the 68 landmark loci to vertices.
    pub fn new(spec: SynthFaceSpec) -> Result<Self> {
        if spec.target_vertices < 200 {
            return Err(Error::InvalidInput(format!(
                "synthetic face needs at least 200 vertices, asked for {}",
                spec.target_vertices
            )));
        }
        if spec.classes == 0 || spec.frames < 2 {
            return Err(Error::InvalidInput("need at least one class and two frames".into()));
        }
        let side = (spec.target_vertices as f64).sqrt().round() as usize;
        let step = 2.0 / (side - 1) as f64;
        let uv: Vec<[f64; 2]> = (0..side * side)
            .map(|i| [-1.0 + (i % side) as f64 * step, -1.0 + (i / side) as f64 * step])
            .collect();
        let mut triangles = Vec::with_capacity(2 * (side - 1) * (side - 1));
        for y in 0..side - 1 {
            for x in 0..side - 1 {
                let a = y * side + x;
                let (b, c, d) = (a + 1, a + side, a + side + 1);
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        let topology = Arc::new(MeshTopology::new(side * side, triangles)?);

        let mut used = BTreeSet::new();
        let mut indices = Vec::with_capacity(LANDMARK_COUNT);
        for (j, p) in landmark_uv().iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (i, q) in uv.iter().enumerate() {
                if used.contains(&i) {
                    continue;
                }
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            let (d, i) = best.unwrap();
            if d.sqrt() > 2.0 * step {
                return Err(Error::InvalidInput(format!(
                    "grid of {} vertices is too coarse to place landmark {j} distinctly",
                    side * side
                )));
            }
            used.insert(i);
            indices.push(i);
        }
        let landmarks = LandmarkIndexTable::new(indices, side * side)?;
        Ok(SynthFace {
            spec,
            side,
            uv,
            topology,
            landmarks,
        })
    }

    pub fn spec(&self) -> &SynthFaceSpec {
        &self.spec
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn topology(&self) -> &Arc<MeshTopology> {
        &self.topology
    }

    pub fn landmarks(&self) -> &LandmarkIndexTable {
        &self.landmarks
    }

    pub fn neutral(&self, id: &Identity) -> Mesh {
        let [rx, ry, rz] = id.radii;
        let positions = self
            .uv
            .iter()
            .map(|&[u, v]| {
                let (th, ph) = (u * THETA_MAX, v * PHI_MAX);
                let base = [rx * th.sin() * ph.cos(), ry * ph.sin(), rz * th.cos() * ph.cos()];
                let n = [base[0] / (rx * rx), base[1] / (ry * ry), base[2] / (rz * rz)];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                let h = id.nose * gauss(u / 0.09, (v + 0.02) / 0.16)
                    + id.brow * gauss(u / 0.45, (v - 0.42) / 0.07)
                    + id.chin * gauss(u / 0.25, (v + 0.78) / 0.12)
                    + id.cheek * (gauss((u - 0.45) / 0.18, (v + 0.1) / 0.18) + gauss((u + 0.45) / 0.18, (v + 0.1) / 0.18))
                    - id.eye_depth * (gauss((u - 0.35) / 0.12, (v - 0.25) / 0.08) + gauss((u + 0.35) / 0.12, (v - 0.25) / 0.08));
                add(base, scaled(n, h / len))
            })
            .collect();
        Mesh::new(self.topology.clone(), positions).expect("analytic positions are finite")
    }

    fn vertex_normals(mesh: &Mesh) -> Vec<[f64; 3]> {
        let p = mesh.positions();
        let mut n = vec![[0.0; 3]; p.len()];
        for t in mesh.topology().triangles() {
            let (a, b, c) = (p[t[0]], p[t[1]], p[t[2]]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let f = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
            for &v in t {
                n[v] = add(n[v], f);
            }
        }
        for v in &mut n {
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            *v = scaled(*v, 1.0 / l);
        }
        n
    }

    /// Dense apex displacement for atom weights `w` on identity `id`.
    pub fn blend_field(&self, id: &Identity, neutral: &Mesh, w: &[f64; ATOMS]) -> DisplacementField {
        let s = id.radii[0] / 75.0;
        let normals = Self::vertex_normals(neutral);
        let (ry, rz) = (id.radii[1], id.radii[2]);
        let pivot = [0.0, 0.15 * ry, -0.4 * rz];
        let theta = 0.2 * w[JAW];
        let values = self
            .uv
            .iter()
            .zip(neutral.positions())
            .zip(&normals)
            .map(|((&[u, v], &p), &n)| {
                let mut d = [0.0; 3];
                // jaw: rotation of the lower face about a horizontal axis
                let m = smoothstep((-0.28 - v) / 0.22) * (1.0 - (u / 0.95).powi(2)).max(0.0).powi(2);
                if m > 0.0 && theta != 0.0 {
                    let (y, z) = (p[1] - pivot[1], p[2] - pivot[2]);
                    let (c, sn) = (theta.cos(), theta.sin());
                    d = add(d, scaled([0.0, c * y - sn * z - y, sn * y + c * z - z], m));
                }
                for (atom, side) in [(SMILE_L, -1.0), (SMILE_R, 1.0)] {
                    let b = bump(u, v, 0.3 * side, -0.4, 0.32, 0.25);
                    if b > 0.0 {
                        let a = w[atom];
                        d = add(d, scaled(add(scaled([2.5 * side, 4.5, 0.0], a * s), scaled(n, 1.5 * a * a)), b));
                    }
                }
                let b = bump(u, v, -0.35, 0.42, 0.35, 0.22) + bump(u, v, 0.35, 0.42, 0.35, 0.22);
                d = add(d, scaled(add([0.0, 6.0 * s * w[BROW_RAISE], 0.0], scaled(n, 0.8 * w[BROW_RAISE])), b));
                for side in [-1.0, 1.0] {
                    let b = bump(u, v, 0.22 * side, 0.36, 0.22, 0.18);
                    let a = w[BROW_FURROW];
                    d = add(d, scaled(add([-3.5 * side * s * a, -2.5 * s * a, 0.0], scaled(n, 1.5 * a)), b));
                }
                let b = bump(u, v, 0.0, -0.42, 0.38, 0.22);
                let a = w[PUCKER];
                d = add(d, scaled(add([-6.0 * s * a * u / 0.38, 0.0, 0.0], scaled(n, 5.0 * a + 1.0 * a * a)), b));
                let b = bump(u, v, -0.35, 0.3, 0.16, 0.08) + bump(u, v, 0.35, 0.3, 0.16, 0.08);
                d = add(d, [0.0, -3.5 * s * w[EYE_CLOSE] * b, 0.0]);
                let b = bump(u, v, -0.48, -0.18, 0.28, 0.28) + bump(u, v, 0.48, -0.18, 0.28, 0.28);
                let a = w[CHEEK];
                d = add(d, scaled(n, b * (5.0 * s * a + a * a)));
                let b = bump(u, v, 0.0, -0.3, 0.3, 0.1);
                d = add(d, scaled([0.0, 3.0, 1.5], b * s * w[UPPER_LIP]));
                d
            })
            .collect();
        DisplacementField::new(values).expect("analytic displacements are finite")
    }

    /// Monotone neutral-to-apex profile; `gamma` warps the onset timing.
    pub fn envelope(&self, gamma: f64) -> Vec<f64> {
        let t_max = (self.spec.frames - 1) as f64;
        (0..self.spec.frames)
            .map(|t| {
                if t + 1 == self.spec.frames {
                    1.0
                } else {
                    smoothstep((t as f64 / t_max).powf(gamma))
                }
            })
            .collect()
    }

    /// One labeled sequence for `identity`, with per-sequence jitter drawn
    /// from `seq_seed`.
    pub fn sequence(&self, identity: &Identity, class: usize, seq_seed: u64) -> Result<ExpressionSequence> {
        if class >= self.spec.classes {
            return Err(Error::InvalidInput(format!(
                "class {class} out of range for {} classes",
                self.spec.classes
            )));
        }
        let mut rng = rng::stream(seq_seed, "sequence");
        let mut w = class_weights(class);
        for x in w.iter_mut() {
            *x *= rng.random_range(0.8..1.2);
        }
        if self.spec.variation > 0.0 {
            let jitter = Normal::new(0.0, self.spec.variation).unwrap();
            for x in w.iter_mut() {
                *x += jitter.sample(&mut rng);
            }
        }
        let gamma = rng.random_range(0.75..1.35);
        let neutral = self.neutral(identity);
        let blend = self.blend_field(identity, &neutral, &w);
        Ok(ExpressionSequence {
            class,
            weights: w.to_vec(),
            envelope: self.envelope(gamma),
            neutral,
            blend,
            landmarks: self.landmarks.clone(),
        })
    }

    /// `(neutral, per-frame meshes, landmark trajectory)` for one sequence.
    pub fn sample_expression_sequence(
        &self,
        identity_seed: u64,
        class: usize,
    ) -> Result<(Mesh, Vec<Mesh>, LandmarkSequence)> {
        let id = Identity::sample(&mut rng::stream(identity_seed, "identity"));
        let seq = self.sequence(&id, class, rng::child_seed(identity_seed, "class", class as u64))?;
        Ok((seq.neutral.clone(), seq.meshes()?, seq.landmark_sequence()?))
    }
}

/// Sequence stored as `neutral + envelope[t] * blend`.
#[derive(Clone, Debug)]
pub struct ExpressionSequence {
    pub class: usize,
    pub weights: Vec<f64>,
    pub envelope: Vec<f64>,
    pub neutral: Mesh,
    pub blend: DisplacementField,
    landmarks: LandmarkIndexTable,
}

impl ExpressionSequence {
    pub fn frame_count(&self) -> usize {
        self.envelope.len()
    }

    pub fn displacement(&self, t: usize) -> DisplacementField {
        let e = self.envelope[t];
        DisplacementField::new(self.blend.values().iter().map(|d| scaled(*d, e)).collect()).unwrap()
    }

    pub fn frame(&self, t: usize) -> Result<Mesh> {
        if t == 0 {
            return Ok(self.neutral.clone());
        }
        apply_displacement(&self.neutral, &self.displacement(t))
    }

    pub fn meshes(&self) -> Result<Vec<Mesh>> {
        (0..self.frame_count()).map(|t| self.frame(t)).collect()
    }

    pub fn landmark_frame(&self, t: usize) -> Result<LandmarkFrame> {
        extract_landmarks(&self.frame(t)?, &self.landmarks)
    }

    pub fn landmark_sequence(&self) -> Result<LandmarkSequence> {
        LandmarkSequence::new((0..self.frame_count()).map(|t| self.landmark_frame(t)).collect::<Result<_>>()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub face: SynthFaceSpec,
    pub identities: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            face: SynthFaceSpec::default(),
            identities: 100,
            seed: 0,
        }
    }
}

/// One sequence per (identity, class).
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub face: SynthFace,
    pub identities: Vec<Identity>,
    pub sequences: Vec<ExpressionSequence>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        let face = SynthFace::new(spec.face.clone())?;
        let root = rng::child_seed(spec.seed, rng::CORPUS, 0);
        let mut id_rng = rng::stream(root, "identities");
        let identities: Vec<Identity> = (0..spec.identities).map(|_| Identity::sample(&mut id_rng)).collect();
        let mut sequences = Vec::with_capacity(spec.identities * spec.face.classes);
        for (i, id) in identities.iter().enumerate() {
            for c in 0..spec.face.classes {
                let seed = rng::child_seed(root, "sequence", (i * spec.face.classes + c) as u64);
                sequences.push(face.sequence(id, c, seed)?);
            }
        }
        Ok(Corpus {
            spec: spec.clone(),
            face,
            identities,
            sequences,
        })
    }

    pub fn identity_of(&self, seq_index: usize) -> usize {
        seq_index / self.spec.face.classes
    }

    pub fn template_neutral(&self) -> Mesh {
        self.face.neutral(&Identity::template())
    }

    /// Writes `<out>/<identity>/<class>/frame_%04d.obj` with a landmark
    /// index file per sequence and `meta.json` at the root. `identities`
    /// limits the export to the first identities.
    pub fn export(&self, out: &Path, identities: Option<usize>) -> Result<Vec<PathBuf>> {
        let n = identities.unwrap_or(self.identities.len()).min(self.identities.len());
        let mut dirs = Vec::new();
        for (s, seq) in self.sequences.iter().enumerate() {
            let id = self.identity_of(s);
            if id >= n {
                break;
            }
            let dir = out.join(format!("id{id:03}")).join(class_name(seq.class));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            for t in 0..seq.frame_count() {
                write_obj(&dir.join(format!("frame_{t:04}.obj")), &seq.frame(t)?)?;
            }
            write_landmark_indices(&dir.join("landmarks.txt"), &self.face.landmarks)?;
            dirs.push(dir);
        }
        let meta = serde_json::json!({
            "spec": self.spec,
            "exported_identities": n,
            "topology_hash": self.face.topology().hash(),
            "class_names": (0..self.spec.face.classes).map(class_name).collect::<Vec<_>>(),
        });
        let path = out.join("meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(dirs)
    }
}

/// How corpus sequences are divided for training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Classes never seen in training (expression-independent test).
    pub held_out_classes: Vec<usize>,
    /// Identities reserved for validation, taken after the training ones.
    pub validation_identities: usize,
    /// Identities reserved for the identity-independent test, taken last.
    pub test_identities: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            held_out_classes: vec![5],
            validation_identities: 10,
            test_identities: 10,
        }
    }
}

/// Sequence indices of each part of a split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Held-out classes on training identities.
    pub expression_test: Vec<usize>,
    /// Training classes on held-out identities.
    pub identity_test: Vec<usize>,
}

impl Corpus {
    pub fn split(&self, spec: &SplitSpec) -> Result<Split> {
        let n = self.identities.len();
        let reserved = spec.validation_identities + spec.test_identities;
        if reserved >= n {
            return Err(Error::Config(format!(
                "{reserved} reserved identities leave none of {n} for training"
            )));
        }
        if spec.held_out_classes.len() >= self.spec.face.classes {
            return Err(Error::Config("every class is held out".into()));
        }
        if let Some(c) = spec.held_out_classes.iter().find(|&&c| c >= self.spec.face.classes) {
            return Err(Error::Config(format!("held-out class {c} does not exist")));
        }
        let train_ids = n - reserved;
        let val_end = train_ids + spec.validation_identities;
        let held = |c: usize| spec.held_out_classes.contains(&c);
        Ok(Split {
            train: self.sequences_where(|i, c| i < train_ids && !held(c)),
            validation: self.sequences_where(|i, c| (train_ids..val_end).contains(&i) && !held(c)),
            expression_test: self.sequences_where(|i, c| i < train_ids && held(c)),
            identity_test: self.sequences_where(|i, c| i >= val_end && !held(c)),
        })
    }
}

/// Training pairs drawn from chosen (sequence, frame) cells of a corpus,
/// materialized on demand.
pub struct CorpusPairs<'a> {
    corpus: &'a Corpus,
    items: Vec<(usize, usize)>,
    neutrals: Vec<Arc<Mesh>>,
    weights: Vec<Arc<VertexWeightTable>>,
    table: Arc<LandmarkIndexTable>,
}

impl Corpus {
    /// Every listed frame of every listed sequence.
    pub fn pairs(&self, sequences: &[usize], frames: &[usize]) -> Result<CorpusPairs<'_>> {
        let mut items = Vec::with_capacity(sequences.len() * frames.len());
        for &s in sequences {
            let seq = self
                .sequences
                .get(s)
                .ok_or_else(|| Error::InvalidInput(format!("sequence {s} out of range")))?;
            for &t in frames {
                if t >= seq.frame_count() {
                    return Err(Error::InvalidInput(format!("frame {t} out of range")));
                }
                items.push((s, t));
            }
        }
        let mut neutrals = Vec::with_capacity(self.identities.len());
        let mut weights = Vec::with_capacity(self.identities.len());
        for id in &self.identities {
            let n = self.face.neutral(id);
            weights.push(Arc::new(compute_vertex_weights(&n, self.face.landmarks())?));
            neutrals.push(Arc::new(n));
        }
        Ok(CorpusPairs {
            corpus: self,
            items,
            neutrals,
            weights,
            table: Arc::new(self.face.landmarks().clone()),
        })
    }

    /// Sequence indices accepted by `pred(identity, class)`.
    pub fn sequences_where(&self, pred: impl Fn(usize, usize) -> bool) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&s| pred(self.identity_of(s), self.sequences[s].class))
            .collect()
    }
}

impl CorpusPairs<'_> {
    pub fn items(&self) -> &[(usize, usize)] {
        &self.items
    }
}

impl PairSource for CorpusPairs<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn pair(&self, i: usize) -> Result<TrainPair> {
        let (s, t) = self.items[i];
        let id = self.corpus.identity_of(s);
        Ok(TrainPair {
            neutral: self.neutrals[id].clone(),
            weights: self.weights[id].clone(),
            table: self.table.clone(),
            target: self.corpus.sequences[s].frame(t)?,
        })
    }
}

/// Loads a directory of lexically ordered `.obj`/`.ply` frames sharing one
/// topology plus its `landmarks.txt`.
pub fn ingest_sequence_dir(dir: &Path) -> Result<(Vec<Mesh>, LandmarkSequence)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("obj") || e.eq_ignore_ascii_case("ply"))
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: need at least two mesh frames, found {}",
            dir.display(),
            files.len()
        )));
    }
    let mut meshes: Vec<Mesh> = Vec::with_capacity(files.len());
    let mut topology: Option<Arc<MeshTopology>> = None;
    for f in &files {
        let data = read_mesh(f)?;
        let topo = match &topology {
            Some(t) => {
                if t.vertex_count() != data.positions.len() || t.triangles() != data.triangles.as_slice() {
                    return Err(Error::Topology(format!(
                        "{}: topology differs from {}",
                        f.display(),
                        files[0].display()
                    )));
                }
                t.clone()
            }
            None => {
                let t = Arc::new(MeshTopology::new(data.positions.len(), data.triangles)?);
                topology = Some(t.clone());
                t
            }
        };
        meshes.push(Mesh::new(topo, data.positions)?);
    }
    let table = read_landmark_indices(&dir.join("landmarks.txt"), meshes[0].vertex_count())?;
    let frames = meshes.iter().map(|m| extract_landmarks(m, &table)).collect::<Result<Vec<_>>>()?;
    Ok((meshes, LandmarkSequence::new(frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthFace {
        SynthFace::new(SynthFaceSpec {
            target_vertices: 900,
            frames: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn topology_is_deterministic_and_landmarks_distinct() {
        let a = SynthFace::new(SynthFaceSpec::default()).unwrap();
        let b = SynthFace::new(SynthFaceSpec::default()).unwrap();
        assert_eq!(a.topology().hash(), b.topology().hash());
        let n = a.topology().vertex_count() as f64;
        assert!((n - 1500.0).abs() <= 150.0, "{n}");
        let set: BTreeSet<_> = a.landmarks().indices().iter().collect();
        assert_eq!(set.len(), LANDMARK_COUNT);
    }

    #[test]
    fn too_coarse_is_rejected() {
        let spec = SynthFaceSpec {
            target_vertices: 150,
            ..Default::default()
        };
        assert!(SynthFace::new(spec).is_err());
    }

    #[test]
    fn envelope_is_monotone_with_fixed_ends() {
        let f = small();
        for gamma in [0.75, 1.0, 1.35] {
            let e = f.envelope(gamma);
            assert_eq!(e[0], 0.0);
            assert_eq!(*e.last().unwrap(), 1.0);
            assert!(e.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sequence_obeys_data_model() {
        let f = small();
        let (neutral, meshes, lms) = f.sample_expression_sequence(3, 1).unwrap();
        assert_eq!(meshes.len(), 8);
        assert_eq!(meshes[0].positions(), neutral.positions());
        let z0 = extract_landmarks(&neutral, f.landmarks()).unwrap();
        for (t, m) in meshes.iter().enumerate() {
            let d = m.displacement_from(&neutral).unwrap();
            let sparse = d.restrict(f.landmarks()).unwrap();
            for ((a, b), s) in lms.frames()[t].points().iter().zip(z0.points()).zip(sparse.values()) {
                for c in 0..3 {
                    assert!((a[c] - b[c] - s[c]).abs() < 1e-12);
                }
            }
        }
        // apex = blend field
        let id = Identity::sample(&mut rng::stream(3, "identity"));
        let seq = f.sequence(&id, 1, rng::child_seed(3, "class", 1)).unwrap();
        assert_eq!(seq.displacement(7).values(), seq.blend.values());
    }

    #[test]
    fn atoms_vanish_away_from_support() {
        let f = small();
        let id = Identity::template();
        let neutral = f.neutral(&id);
        let mut w = [0.0; ATOMS];
        w[EYE_CLOSE] = 1.0;
        let d = f.blend_field(&id, &neutral, &w);
        for (uv, v) in f.uv.iter().zip(d.values()) {
            if uv[1] < 0.0 {
                assert_eq!(*v, [0.0; 3]);
            }
        }
        assert!(d.values().iter().any(|v| v[1] < -1.0));
    }

    #[test]
    fn corpus_is_reproducible() {
        let spec = CorpusSpec {
            face: SynthFaceSpec {
                target_vertices: 400,
                classes: 2,
                frames: 4,
                ..Default::default()
            },
            identities: 3,
            seed: 11,
        };
        let a = Corpus::generate(&spec).unwrap();
        let b = Corpus::generate(&spec).unwrap();
        assert_eq!(a.sequences.len(), 6);
        for (x, y) in a.sequences.iter().zip(&b.sequences) {
            assert_eq!(x.blend, y.blend);
            assert_eq!(x.envelope, y.envelope);
        }
        assert_ne!(a.sequences[0].blend, a.sequences[2].blend);
    }
}
