//! Sparse-to-dense decoder: a fully connected lift of the landmark
//! displacement followed by spiral convolutions interleaved with
//! up-sampling through a mesh hierarchy.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batched_spiral, Adam, Graph, Linear, NodeId, ParamStore, SparseTransfer, SpiralConv, Tensor};
use crate::checkpoint::Checkpoint;
use crate::curve::{
    sequence_to_sparse_displacements, srvf_decode, srvf_encode, srvf_normalize, LandmarkFrame, LandmarkSequence,
};
use crate::error::{Error, Result};
use crate::mesh::{
    apply_displacement, build_hierarchy, displacement_l1, extract_landmarks, mean_pervertex_error, weighted_point_l1,
    write_obj, DisplacementField, LandmarkIndexTable, Mesh, MeshTopology, SamplingHierarchy, SparseDisplacement,
    VertexWeightTable,
};
use crate::rng;

pub const CHECKPOINT_KIND: &str = "s2d-decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Landmark count.
    pub k: usize,
    /// Output channels of each spiral convolution, coarse to fine. The last
    /// entry must be 3; there are `channels.len() - 1` up-samplings.
    pub channels: Vec<usize>,
    pub factor: usize,
    /// Spiral length per hierarchy level, fine to coarse. `None` uses the
    /// default 12 down to 9.
    pub spiral_lengths: Option<Vec<usize>>,
    pub leaky_slope: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            k: 68,
            channels: vec![64, 32, 32, 16, 3],
            factor: 4,
            spiral_lengths: None,
            leaky_slope: 0.2,
        }
    }
}

impl DecoderConfig {
    pub fn depth(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("decoder needs k >= 1".into()));
        }
        if self.channels.len() < 2 || self.channels.last() != Some(&3) || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder channels must list at least two positive widths ending in 3, got {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Spiral-convolution decoder bound to one sampling hierarchy.
#[derive(Clone, Debug)]
pub struct S2dDecoder {
    config: DecoderConfig,
    hierarchy: Arc<SamplingHierarchy>,
    params: ParamStore,
    fc: Linear,
    /// `convs[j]` runs at level `depth - j`.
    convs: Vec<SpiralConv>,
    ups: Vec<Arc<SparseTransfer>>,
}

impl S2dDecoder {
    /// Builds the hierarchy on `reference` and initializes the weights.
    pub fn new(config: DecoderConfig, reference: &Mesh, seed: u64) -> Result<Self> {
        config.validate()?;
        let hierarchy = build_hierarchy(reference, config.depth(), config.factor, config.spiral_lengths.as_deref())?;
        Self::with_hierarchy(config, Arc::new(hierarchy), seed)
    }

    pub fn with_hierarchy(config: DecoderConfig, hierarchy: Arc<SamplingHierarchy>, seed: u64) -> Result<Self> {
        config.validate()?;
        let depth = config.depth();
        if hierarchy.depth() != depth {
            return Err(Error::Hierarchy(format!(
                "decoder with {} channel stages needs {depth} down-samplings, hierarchy has {}",
                config.channels.len(),
                hierarchy.depth()
            )));
        }
        let sizes = hierarchy.level_sizes();
        let mut rng = rng::stream(seed, rng::S2D_INIT);
        let mut params = ParamStore::default();
        let fc = Linear::new(&mut params, "fc", 3 * config.k, sizes[depth] * config.channels[0], &mut rng);
        let mut convs = Vec::with_capacity(depth + 1);
        let mut c_in = config.channels[0];
        for (j, &c_out) in config.channels.iter().enumerate() {
            let length = hierarchy.spiral(depth - j).length();
            convs.push(SpiralConv::new(&mut params, &format!("conv{j}"), length, c_in, c_out, &mut rng));
            c_in = c_out;
        }
        let ups = (0..depth).map(|l| SparseTransfer::new(hierarchy.up(l).clone())).collect();
        Ok(S2dDecoder {
            config,
            hierarchy,
            params,
            fc,
            convs,
            ups,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn hierarchy(&self) -> &Arc<SamplingHierarchy> {
        &self.hierarchy
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vertex_count(&self) -> usize {
        self.hierarchy.level_sizes()[0]
    }

    pub fn fc_width(&self) -> usize {
        self.params.get(self.fc.w).cols()
    }

    /// `x` is `batch x 3k`; the result stacks `batch` blocks of `N x 3`.
    pub fn forward_graph(&self, g: &mut Graph, p: &[NodeId], x: NodeId, batch: usize) -> Result<NodeId> {
        let depth = self.config.depth();
        let sizes = self.hierarchy.level_sizes();
        let mut h = self.fc.forward(g, p, x)?;
        h = g.reshape(h, batch * sizes[depth], self.config.channels[0])?;
        for (j, conv) in self.convs.iter().enumerate() {
            let level = depth - j;
            let spiral = batched_spiral(self.hierarchy.spiral(level).indices(), sizes[level], batch);
            h = conv.forward(g, p, h, &spiral)?;
            if level > 0 {
                h = g.leaky_relu(h, self.config.leaky_slope);
                h = g.sparse_matmul(&self.ups[level - 1], h, batch)?;
            }
        }
        Ok(h)
    }

    fn input_tensor(&self, ds: &[&SparseDisplacement]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ds.len() * 3 * self.config.k);
        for d in ds {
            if d.k() != self.config.k {
                return Err(Error::Shape(format!(
                    "decoder expects {} landmarks, displacement has {}",
                    self.config.k,
                    d.k()
                )));
            }
            data.extend(d.flat());
        }
        Tensor::new(ds.len(), 3 * self.config.k, data)
    }

    /// Decodes one landmark displacement into a dense displacement field.
    pub fn forward(&self, d: &SparseDisplacement) -> Result<DisplacementField> {
        Ok(self.forward_batch(&[d])?.pop().unwrap())
    }

    pub fn forward_batch(&self, ds: &[&SparseDisplacement]) -> Result<Vec<DisplacementField>> {
        if ds.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.params.values().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(self.input_tensor(ds)?);
        let y = self.forward_graph(&mut g, &p, x, ds.len())?;
        let out = g.value(y)?;
        let n = self.vertex_count();
        out.data()
            .chunks_exact(3 * n)
            .map(DisplacementField::from_flat)
            .collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let level0 = &self.hierarchy.levels()[0];
        let n = level0.positions.len();
        let positions = Tensor::new(n, 3, level0.positions.iter().flatten().copied().collect()).unwrap();
        let tris = level0.topology.triangles();
        let triangles = Tensor::new(tris.len(), 3, tris.iter().flatten().map(|&i| i as f64).collect()).unwrap();
        let mut tensors = vec![
            ("reference.positions".to_string(), positions),
            ("reference.triangles".to_string(), triangles),
        ];
        tensors.extend(self.params.named().into_iter().map(|(n, t)| (format!("net.{n}"), t)));
        let meta = serde_json::json!({
            "config": self.config,
            "hierarchy": self.hierarchy.fingerprint(),
            "level_sizes": self.hierarchy.level_sizes(),
            "extra": meta,
        });
        Checkpoint::new(CHECKPOINT_KIND, meta, tensors)
    }

    /// Rebuilds the hierarchy from the stored reference mesh and checks it
    /// against the recorded fingerprint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DecoderConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("decoder config: {e}")))?;
        let positions = ck.tensor("reference.positions")?;
        let triangles = ck.tensor("reference.triangles")?;
        if positions.cols() != 3 || triangles.cols() != 3 {
            return Err(Error::Checkpoint("reference mesh tensors must have 3 columns".into()));
        }
        let tris = triangles
            .data()
            .chunks_exact(3)
            .map(|t| [t[0] as usize, t[1] as usize, t[2] as usize])
            .collect();
        let topo = Arc::new(MeshTopology::new(positions.rows(), tris)?);
        let pos = positions.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let reference = Mesh::new(topo, pos)?;
        let mut net = S2dDecoder::new(config, &reference, 0)?;
        let expected = ck.meta["hierarchy"].as_str().unwrap_or_default();
        if net.hierarchy.fingerprint() != expected {
            return Err(Error::Checkpoint(
                "rebuilt mesh hierarchy does not match the one the decoder was trained on".into(),
            ));
        }
        net.params.load(&ck.group("net"))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `beta1 * L_dr + beta2 * L_pr` for one prediction.
#[allow(clippy::too_many_arguments)]
pub fn s2d_loss(
    pred: &DisplacementField,
    gt: &DisplacementField,
    neutral: &Mesh,
    gt_mesh: &Mesh,
    w: &VertexWeightTable,
    beta1: f64,
    beta2: f64,
) -> Result<f64> {
    neutral.same_topology(gt_mesh)?;
    if gt.len() != neutral.vertex_count() {
        return Err(Error::Shape(format!(
            "ground-truth field has {} vertices, mesh has {}",
            gt.len(),
            neutral.vertex_count()
        )));
    }
    for ((n, d), m) in neutral.positions().iter().zip(gt.values()).zip(gt_mesh.positions()) {
        if (0..3).any(|c| (n[c] + d[c] - m[c]).abs() > 1e-9) {
            return Err(Error::InvalidInput(
                "ground-truth mesh is not neutral plus ground-truth displacement".into(),
            ));
        }
    }
    let mut loss = 0.0;
    if beta1 != 0.0 {
        loss += beta1 * displacement_l1(pred, gt)?;
    }
    if beta2 != 0.0 {
        loss += beta2 * weighted_point_l1(&apply_displacement(neutral, pred)?, gt_mesh, w)?;
    }
    Ok(loss)
}

/// Which terms the training objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    DisplacementOnly,
    Unweighted,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct S2dTrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Random subset of training pairs visited per epoch; `None` visits all.
    pub pairs_per_epoch: Option<usize>,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for S2dTrainConfig {
    fn default() -> Self {
        S2dTrainConfig {
            beta1: 1.0,
            beta2: 0.1,
            lr: 1e-3,
            batch: 16,
            epochs: 300,
            pairs_per_epoch: None,
            loss: LossMode::Weighted,
            seed: 0,
        }
    }
}

/// One supervised example: the dense target and what the loss needs.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub neutral: Arc<Mesh>,
    pub weights: Arc<VertexWeightTable>,
    pub table: Arc<LandmarkIndexTable>,
    pub target: Mesh,
}

impl TrainPair {
    pub fn input(&self) -> Result<SparseDisplacement> {
        SparseDisplacement::between(
            &extract_landmarks(&self.target, &self.table)?,
            &extract_landmarks(&self.neutral, &self.table)?,
        )
    }

    pub fn displacement(&self) -> Result<DisplacementField> {
        self.target.displacement_from(&self.neutral)
    }
}

/// Random-access collection of training pairs, so large corpora can be
/// materialized one batch at a time.
pub trait PairSource {
    fn len(&self) -> usize;
    fn pair(&self, i: usize) -> Result<TrainPair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [TrainPair] {
    fn len(&self) -> usize {
        <[TrainPair]>::len(self)
    }

    fn pair(&self, i: usize) -> Result<TrainPair> {
        Ok(self[i].clone())
    }
}

impl PairSource for Vec<TrainPair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&self, i: usize) -> Result<TrainPair> {
        Ok(self[i].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct S2dTrainLog {
    pub epochs: Vec<EpochLog>,
    /// Validation error of the untrained network.
    pub initial_val_error: f64,
    pub best_epoch: usize,
    pub best_val_error: f64,
}

impl S2dTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_error\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_error));
        }
        s
    }
}

impl S2dDecoder {
    /// Mean training loss over one batch and its parameter gradients.
    pub fn batch_loss(&self, pairs: &[TrainPair], cfg: &S2dTrainConfig) -> Result<(f64, Vec<Tensor>)> {
        let n = self.vertex_count();
        let b = pairs.len();
        let inputs = pairs.iter().map(TrainPair::input).collect::<Result<Vec<_>>>()?;
        let mut gt = Vec::with_capacity(b * n * 3);
        let mut neutral = Vec::with_capacity(b * n * 3);
        let mut target = Vec::with_capacity(b * n * 3);
        let mut weights = Vec::with_capacity(b * n * 3);
        for p in pairs {
            if p.target.vertex_count() != n || p.weights.len() != n {
                return Err(Error::Topology(format!(
                    "training pair has {} vertices, decoder expects {n}",
                    p.target.vertex_count()
                )));
            }
            p.neutral.same_topology(&p.target)?;
            gt.extend(p.displacement()?.flat());
            neutral.extend(p.neutral.positions().iter().flatten());
            target.extend(p.target.positions().iter().flatten());
            let uniform = cfg.loss == LossMode::Unweighted;
            weights.extend(p.weights.weights().iter().flat_map(|&w| [if uniform { 1.0 } else { w }; 3]));
        }
        let rows = b * n;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(self.input_tensor(&inputs.iter().collect::<Vec<_>>())?);
        let pred = self.forward_graph(&mut g, &p, x, b)?;
        let norm = 1.0 / (n * b) as f64;

        let gt = g.constant(Tensor::new(rows, 3, gt)?);
        let diff = g.sub(pred, gt)?;
        let dr = g.l1_norm(diff);
        let mut loss = g.scale(dr, cfg.beta1 * norm);
        if cfg.loss != LossMode::DisplacementOnly && cfg.beta2 != 0.0 {
            let neutral = g.constant(Tensor::new(rows, 3, neutral)?);
            let target = g.constant(Tensor::new(rows, 3, target)?);
            let w = g.constant(Tensor::new(rows, 3, weights)?);
            let points = g.add(pred, neutral)?;
            let e = g.sub(points, target)?;
            let e = g.abs(e);
            let e = g.mul(e, w)?;
            let pr = g.sum(e);
            let pr = g.scale(pr, cfg.beta2 * norm);
            loss = g.add(loss, pr)?;
        }
        let value = g.scalar(loss)?;
        let grads = g.grad_or_zeros(loss, &p)?;
        let grads = grads.iter().map(|&id| g.value(id).cloned()).collect::<Result<Vec<_>>>()?;
        Ok((value, grads))
    }

    /// Per-pair mean per-vertex Euclidean error.
    pub fn evaluate(&self, source: &dyn PairSource, batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(source.len());
        let idx: Vec<usize> = (0..source.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let pairs = chunk.iter().map(|&i| source.pair(i)).collect::<Result<Vec<_>>>()?;
            let inputs = pairs.iter().map(TrainPair::input).collect::<Result<Vec<_>>>()?;
            let preds = self.forward_batch(&inputs.iter().collect::<Vec<_>>())?;
            for (p, d) in pairs.iter().zip(preds) {
                let mesh = apply_displacement(&p.neutral, &d)?;
                out.push(mean_pervertex_error(&mesh, &p.target)?.0);
            }
        }
        Ok(out)
    }

    fn mean_error(&self, source: &dyn PairSource, batch: usize) -> Result<f64> {
        let e = self.evaluate(source, batch)?;
        Ok(e.iter().sum::<f64>() / e.len().max(1) as f64)
    }

    /// Adam on the configured objective. The parameters with the lowest
    /// validation error are kept. `on_epoch` sees each epoch's record.
    pub fn train(
        &mut self,
        train: &dyn PairSource,
        val: &dyn PairSource,
        cfg: &S2dTrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<S2dTrainLog> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
        }
        if cfg.batch == 0 || !(cfg.lr > 0.0) {
            return Err(Error::Config("batch and learning rate must be positive".into()));
        }
        let mut adam = Adam::new(&self.params, cfg.lr);
        let mut order_rng = rng::stream(cfg.seed, rng::S2D_BATCHES);
        let initial = self.mean_error(val, cfg.batch)?;
        let mut log = S2dTrainLog {
            initial_val_error: initial,
            best_val_error: initial,
            ..Default::default()
        };
        let mut best = self.params.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut order_rng);
            let take = cfg.pairs_per_epoch.unwrap_or(order.len()).min(order.len());
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order[..take].chunks(cfg.batch) {
                let pairs = chunk.iter().map(|&i| train.pair(i)).collect::<Result<Vec<_>>>()?;
                let (loss, grads) = self.batch_loss(&pairs, cfg)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("decoder loss became {loss} in epoch {epoch}")));
                }
                adam.step(&mut self.params, &grads)?;
                total += loss;
                batches += 1;
            }
            let val_error = self.mean_error(val, cfg.batch)?;
            let rec = EpochLog {
                epoch,
                train_loss: total / batches as f64,
                val_error,
            };
            on_epoch(&rec);
            if val_error < log.best_val_error || log.best_epoch == 0 && val_error <= log.best_val_error {
                log.best_val_error = val_error;
                log.best_epoch = epoch;
                best = self.params.clone();
            }
            log.epochs.push(rec);
        }
        if log.best_epoch > 0 {
            self.params = best;
        }
        Ok(log)
    }

    /// `neutral + decoder(d)`.
    pub fn generate_expressive_mesh(&self, neutral: &Mesh, d: &SparseDisplacement) -> Result<Mesh> {
        self.check_mesh(neutral)?;
        apply_displacement(neutral, &self.forward(d)?)
    }

    fn check_mesh(&self, m: &Mesh) -> Result<()> {
        if m.topology().as_ref() != self.hierarchy.fine_topology().as_ref() {
            return Err(Error::Topology(
                "mesh topology differs from the decoder's reference topology".into(),
            ));
        }
        Ok(())
    }

    /// One mesh per frame, from displacements relative to the neutral's own
    /// landmarks.
    pub fn generate_4d(&self, neutral: &Mesh, seq: &LandmarkSequence, table: &LandmarkIndexTable) -> Result<Vec<Mesh>> {
        self.check_mesh(neutral)?;
        if seq.k() != table.k() {
            return Err(Error::Shape(format!(
                "sequence has {} landmarks, index table has {}",
                seq.k(),
                table.k()
            )));
        }
        let base = extract_landmarks(neutral, table)?;
        let ds = sequence_to_sparse_displacements(seq, &base)?;
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.chunks(16) {
            for d in self.forward_batch(&chunk.iter().collect::<Vec<_>>())? {
                out.push(apply_displacement(neutral, &d)?);
            }
        }
        Ok(out)
    }

    /// Re-targets the motion of `source` onto `target_neutral`: the motion
    /// is encoded as a sphere point and re-integrated from the target's
    /// landmarks. `scale` defaults to the source amplitude.
    pub fn transfer(
        &self,
        source: &LandmarkSequence,
        target_neutral: &Mesh,
        table: &LandmarkIndexTable,
        scale: Option<f64>,
    ) -> Result<Vec<Mesh>> {
        let seq = transfer_landmarks(source, &extract_landmarks(target_neutral, table)?, scale)?;
        self.generate_4d(target_neutral, &seq, table)
    }

    /// Moves the landmarks of `expressive` to `template` and lets the
    /// decoder carry the rest of the surface along.
    pub fn neutralize(&self, expressive: &Mesh, template: &LandmarkFrame, table: &LandmarkIndexTable) -> Result<Mesh> {
        self.check_mesh(expressive)?;
        let d = SparseDisplacement::between(template, &extract_landmarks(expressive, table)?)?;
        apply_displacement(expressive, &self.forward(&d)?)
    }
}

/// Landmark-level part of [`S2dDecoder::transfer`].
pub fn transfer_landmarks(source: &LandmarkSequence, target: &LandmarkFrame, scale: Option<f64>) -> Result<LandmarkSequence> {
    let point = srvf_normalize(&srvf_encode(source)?)?;
    srvf_decode(&point, target, scale.unwrap_or(point.scale()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub frames: usize,
    pub fps: f64,
    pub topology_hash: String,
    pub files: Vec<String>,
}

/// Writes `frame_%04d.obj` files and `manifest.json` into `dir`.
pub fn export_sequence(dir: &Path, meshes: &[Mesh], fps: f64) -> Result<Vec<PathBuf>> {
    let first = meshes
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot export an empty sequence".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::with_capacity(meshes.len());
    for (t, m) in meshes.iter().enumerate() {
        first.same_topology(m)?;
        let path = dir.join(format!("frame_{t:04}.obj"));
        write_obj(&path, m)?;
        files.push(path);
    }
    let manifest = SequenceManifest {
        frames: meshes.len(),
        fps,
        topology_hash: first.topology().hash(),
        files: files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(files)
}
