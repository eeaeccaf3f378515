//! Conditional Wasserstein GAN with gradient penalty acting in the tangent
//! space of the SRVF hypersphere at a fixed reference point.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Linear, NodeId, ParamStore, Tensor};
use crate::checkpoint::Checkpoint;
use crate::curve::{
    karcher_mean, normalize_motion, srvf_decode, srvf_encode, srvf_normalize, LandmarkFrame, LandmarkSequence,
    MotionNormalization, SpherePoint, Srvf, TangentVector,
};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_KIND: &str = "motion-gan";

/// Generator outputs are clamped to this tangent norm so the exponential map
/// stays inside the injectivity radius.
pub const MAX_TANGENT_NORM: f64 = PI - 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub classes: usize,
    pub noise: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Gradient-penalty weight.
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub critic_steps: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            classes: 6,
            noise: 128,
            generator_hidden: vec![512, 512, 512],
            critic_hidden: vec![512, 512, 512],
            leaky_slope: 0.2,
            alpha1: 1.0,
            alpha2: 10.0,
            lambda: 10.0,
            lr: 1e-4,
            batch: 128,
            epochs: 8000,
            critic_steps: 5,
            seed: 0,
        }
    }
}

impl GanConfig {
    fn validate(&self) -> Result<()> {
        let positive = [self.alpha1, self.alpha2, self.lr];
        if self.classes == 0
            || self.noise == 0
            || self.batch == 0
            || self.critic_steps == 0
            || positive.iter().any(|v| !(*v > 0.0))
            || self.lambda < 0.0
            || self.generator_hidden.contains(&0)
            || self.critic_hidden.contains(&0)
        {
            return Err(Error::Config(format!("invalid GAN configuration: {self:?}")));
        }
        Ok(())
    }
}

/// One-hot label row.
pub fn one_hot(class: usize, classes: usize) -> Result<Vec<f64>> {
    if class >= classes {
        return Err(Error::InvalidInput(format!("label {class} out of range for {classes} classes")));
    }
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    Ok(v)
}

/// Fully connected stack with leaky rectifiers between layers.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
    slope: f64,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], slope: f64, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, slope }
    }

    fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }
}

/// Generator, critic and the reference point they share.
#[derive(Clone, Debug)]
pub struct MotionGan {
    config: GanConfig,
    k: usize,
    frames: usize,
    reference: SpherePoint,
    /// Mean SRVF norm of each class in the training set (normalized units).
    class_scales: Vec<f64>,
    gen_params: ParamStore,
    critic_params: ParamStore,
    generator: Mlp,
    critic: Mlp,
}

impl MotionGan {
    pub fn new(config: GanConfig, reference: SpherePoint, class_scales: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if class_scales.len() != config.classes {
            return Err(Error::Config(format!(
                "{} class scales for {} classes",
                class_scales.len(),
                config.classes
            )));
        }
        let dim = reference.dim();
        let k = reference.srvf().k();
        let frames = reference.srvf().frame_count();
        let mut rng = rng::stream(config.seed, rng::GAN_INIT);
        let mut gen_params = ParamStore::default();
        let mut sizes = vec![config.noise + config.classes];
        sizes.extend(&config.generator_hidden);
        sizes.push(dim);
        let generator = Mlp::new(&mut gen_params, "g", &sizes, config.leaky_slope, &mut rng);
        let mut critic_params = ParamStore::default();
        let mut sizes = vec![dim + config.classes];
        sizes.extend(&config.critic_hidden);
        sizes.push(1);
        let critic = Mlp::new(&mut critic_params, "d", &sizes, config.leaky_slope, &mut rng);
        Ok(MotionGan {
            config,
            k,
            frames,
            reference,
            class_scales,
            gen_params,
            critic_params,
            generator,
            critic,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn reference(&self) -> &SpherePoint {
        &self.reference
    }

    pub fn class_scales(&self) -> &[f64] {
        &self.class_scales
    }

    pub fn tangent_dim(&self) -> usize {
        self.reference.dim()
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.gen_params
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.gen_params
    }

    pub fn critic_params(&self) -> &ParamStore {
        &self.critic_params
    }

    pub fn critic_params_mut(&mut self) -> &mut ParamStore {
        &mut self.critic_params
    }

    fn labels(&self, classes: &[usize]) -> Result<Tensor> {
        let c = self.config.classes;
        let mut data = Vec::with_capacity(classes.len() * c);
        for &l in classes {
            data.extend(one_hot(l, c)?);
        }
        Tensor::new(classes.len(), c, data)
    }

    /// Generator graph: `z ⊕ c`, the MLP, projection onto the tangent space
    /// at the reference point and the norm clamp.
    fn generator_graph(&self, g: &mut Graph, p: &[NodeId], z: &Tensor, labels: &Tensor) -> Result<NodeId> {
        if z.cols() != self.config.noise || z.rows() != labels.rows() {
            return Err(Error::Shape(format!(
                "noise {:?} for {} labels, expected width {}",
                z.shape(),
                labels.rows(),
                self.config.noise
            )));
        }
        let dt = self.reference.dt();
        let zi = g.constant(z.clone());
        let ci = g.constant(labels.clone());
        let x = g.concat_cols(zi, ci)?;
        let raw = self.generator.forward(g, p, x)?;
        let pref = self.reference.samples().to_vec();
        let pcol = g.constant(Tensor::new(pref.len(), 1, pref.clone())?);
        let prow = g.constant(Tensor::row(pref));
        let normal = g.matmul(raw, pcol)?;
        let normal = g.scale(normal, dt);
        let along = g.matmul(normal, prow)?;
        let v = g.sub(raw, along)?;
        // hard clamp: rows above the cap get rescaled by cap / |v|
        let sq = g.square(v);
        let sq = g.row_sums(sq);
        let sq = g.scale(sq, dt);
        let norm = g.sqrt(sq);
        let norms = g.value(norm)?.clone();
        let mask: Vec<f64> = norms.data().iter().map(|&n| if n > MAX_TANGENT_NORM { 1.0 } else { 0.0 }).collect();
        if mask.iter().all(|&m| m == 0.0) {
            return Ok(v);
        }
        let keep = g.constant(Tensor::new(mask.len(), 1, mask.iter().map(|m| 1.0 - m).collect())?);
        let m = g.constant(Tensor::new(mask.len(), 1, mask)?);
        // avoid 1/0 on rows that are not rescaled
        let safe = g.add(norm, keep)?;
        let inv = g.recip(safe);
        let inv = g.scale(inv, MAX_TANGENT_NORM);
        let f = g.mul(inv, m)?;
        let f = g.add(f, keep)?;
        let f = g.broadcast_cols(f, self.tangent_dim())?;
        g.mul(v, f)
    }

    fn critic_graph(&self, g: &mut Graph, p: &[NodeId], x: NodeId, labels: NodeId) -> Result<NodeId> {
        let h = g.concat_cols(x, labels)?;
        self.critic.forward(g, p, h)
    }

    /// Tangent vectors for a batch of noise rows and labels.
    pub fn generate_tangents(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.gen_params.values().iter().map(|t| g.constant(t.clone())).collect();
        let y = self.generator_graph(&mut g, &p, z, &self.labels(classes)?)?;
        Ok(g.value(y)?.clone())
    }

    pub fn generate_tangent(&self, z: &[f64], class: usize) -> Result<TangentVector> {
        let t = self.generate_tangents(&Tensor::row(z.to_vec()), &[class])?;
        TangentVector::project(&self.reference, t.into_data())
    }

    /// `exp_p(G(z, c))`.
    pub fn generate_motion(&self, z: &[f64], class: usize) -> Result<SpherePoint> {
        let v = self.generate_tangent(z, class)?;
        self.reference.exp(&v)
    }

    pub fn critic_scores(&self, x: &Tensor, classes: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p: Vec<NodeId> = self.critic_params.values().iter().map(|t| g.constant(t.clone())).collect();
        let xi = g.constant(x.clone());
        let li = g.constant(self.labels(classes)?);
        let y = self.critic_graph(&mut g, &p, xi, li)?;
        Ok(g.value(y)?.data().to_vec())
    }

    /// Noise row for `seed`.
    pub fn noise(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "noise");
        (0..self.config.noise).map(|_| r.sample(StandardNormal)).collect()
    }

    /// Generated sphere point for `(class, seed)` carrying the amplitude it
    /// should be decoded with: `scale`, or the class-mean amplitude adapted
    /// to the size of `neutral` when `None`.
    pub fn sample_point(&self, class: usize, seed: u64, neutral: &LandmarkFrame, scale: Option<f64>) -> Result<SpherePoint> {
        if neutral.k() != self.k {
            return Err(Error::Shape(format!("neutral has {} landmarks, model uses {}", neutral.k(), self.k)));
        }
        if class >= self.config.classes {
            return Err(Error::InvalidInput(format!(
                "label {class} out of range for {} classes",
                self.config.classes
            )));
        }
        let q = self.generate_motion(&self.noise(seed), class)?;
        let scale = match scale {
            Some(s) => s,
            None => self.class_scales[class] * landmark_size(neutral)?,
        };
        q.with_scale(scale)
    }

    /// Generated motion re-integrated from `neutral`; frame 0 is `neutral`.
    pub fn sample_sequence(&self, class: usize, seed: u64, neutral: &LandmarkFrame, scale: Option<f64>) -> Result<LandmarkSequence> {
        let q = self.sample_point(class, seed, neutral, scale)?;
        srvf_decode(&q, neutral, q.scale())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = vec![
            ("reference".to_string(), Tensor::row(self.reference.samples().to_vec())),
            ("class_scales".to_string(), Tensor::row(self.class_scales.clone())),
        ];
        tensors.extend(self.gen_params.named().into_iter().map(|(n, t)| (format!("gen.{n}"), t)));
        tensors.extend(self.critic_params.named().into_iter().map(|(n, t)| (format!("critic.{n}"), t)));
        let meta = serde_json::json!({
            "config": self.config,
            "k": self.k,
            "frames": self.frames,
            "reference_scale": self.reference.scale(),
        });
        Checkpoint::new(CHECKPOINT_KIND, meta, tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: GanConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("GAN config: {e}")))?;
        let field = |name: &str| {
            ck.meta[name]
                .as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` in GAN metadata")))
        };
        let k = field("k")? as usize;
        let frames = field("frames")? as usize;
        let reference = SpherePoint::new(
            Srvf::from_samples(ck.tensor("reference")?.data().to_vec(), k, frames)?,
            field("reference_scale")?,
        )?;
        let scales = ck.tensor("class_scales")?.data().to_vec();
        let mut gan = MotionGan::new(config, reference, scales)?;
        gan.gen_params.load(&ck.group("gen"))?;
        gan.critic_params.load(&ck.group("critic"))?;
        Ok(gan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub const MOTION_KIND: &str = "motion-sample";

/// Stores one sphere point (with its amplitude) for later interpolation.
pub fn save_motion(path: &Path, q: &SpherePoint, meta: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({
        "k": q.srvf().k(),
        "frames": q.srvf().frame_count(),
        "scale": q.scale(),
        "extra": meta,
    });
    Checkpoint::new(MOTION_KIND, meta, vec![("srvf".into(), Tensor::row(q.samples().to_vec()))]).save(path)
}

pub fn load_motion(path: &Path) -> Result<SpherePoint> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(MOTION_KIND)?;
    let field = |name: &str| {
        ck.meta[name]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` in motion metadata")))
    };
    let srvf = Srvf::from_samples(ck.tensor("srvf")?.data().to_vec(), field("k")? as usize, field("frames")? as usize)?;
    SpherePoint::new(srvf, field("scale")?)
}

/// Frobenius norm of the centered landmark frame; the unit of normalized
/// motion amplitude.
pub fn landmark_size(frame: &LandmarkFrame) -> Result<f64> {
    let seq = LandmarkSequence::new(vec![frame.clone(), frame.clone()])?;
    Ok(normalize_motion(&seq, MotionNormalization::CenterUnitNorm)?.1)
}

/// `mean_i (|grad_x D(x_i)|_2 - 1)^2` at `qhat`, built with second-order
/// differentiable nodes so the result can be differentiated again.
pub fn gradient_penalty<F>(g: &mut Graph, qhat: Tensor, critic: F) -> Result<NodeId>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    let rows = qhat.rows();
    let x = g.variable(qhat);
    let scores = critic(g, x)?;
    let total = g.sum(scores);
    let grad = g.grad_or_zeros(total, &[x])?[0];
    let sq = g.square(grad);
    let sq = g.row_sums(sq);
    // keeps the derivative of sqrt finite at a zero gradient
    let sq = g.add_const(sq, 1e-20);
    let norm = g.sqrt(sq);
    let dev = g.add_const(norm, -1.0);
    let dev = g.square(dev);
    let s = g.sum(dev);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// One labeled training motion.
#[derive(Clone, Debug)]
pub struct MotionSample {
    pub point: SpherePoint,
    pub class: usize,
}

/// Normalizes, encodes and projects labeled landmark sequences.
pub fn motion_samples(sequences: &[(LandmarkSequence, usize)], mode: MotionNormalization) -> Result<Vec<MotionSample>> {
    sequences
        .iter()
        .map(|(seq, class)| {
            let (normalized, _) = normalize_motion(seq, mode)?;
            Ok(MotionSample {
                point: srvf_normalize(&srvf_encode(&normalized)?)?,
                class: *class,
            })
        })
        .collect()
}

/// Karcher mean of the sample points, used as the tangent-space base.
pub fn reference_point(samples: &[MotionSample]) -> Result<SpherePoint> {
    let points: Vec<SpherePoint> = samples.iter().map(|s| s.point.clone()).collect();
    karcher_mean(&points, 1e-10, 500)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    /// `E[D(real)] - E[D(fake)]` averaged over the epoch's critic steps.
    pub wasserstein_estimate: f64,
    /// Reconstruction loss on the matched `(z, c)` pairs after the epoch.
    pub l_r: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GanTrainLog {
    pub initial_l_r: f64,
    pub epochs: Vec<GanEpochLog>,
}

impl GanTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,wasserstein_estimate,l_r,penalty\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.wasserstein_estimate, e.l_r, e.penalty));
        }
        s
    }
}

/// Per-sample L1 norm of `generated - target`, averaged over rows.
pub fn reconstruction_loss_value(generated: &Tensor, target: &Tensor) -> Result<f64> {
    if generated.shape() != target.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", generated.shape(), target.shape())));
    }
    let total: f64 = generated.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / generated.rows().max(1) as f64)
}

/// `|log_p(exp_p(G(z, c))) - log_p(q_gt)|_1` for one pair.
pub fn reconstruction_loss(gan: &MotionGan, z: &[f64], class: usize, q_gt: &SpherePoint) -> Result<f64> {
    let generated = gan.reference.log(&gan.generate_motion(z, class)?)?;
    let target = gan.reference.log(q_gt)?;
    Ok(generated.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// Critic and generator objectives for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// `E[D(fake)] - E[D(real)] + lambda * penalty` (minimized by the critic).
    pub critic: f64,
    /// `-E[D(fake)]`.
    pub generator: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

struct Batch {
    real: Tensor,
    z: Tensor,
    classes: Vec<usize>,
    tau: Vec<f64>,
}

impl MotionGan {
    fn critic_step_graph(&self, g: &mut Graph, batch: &Batch) -> Result<(NodeId, Vec<NodeId>, f64, f64)> {
        let dim = self.tangent_dim();
        let b = batch.classes.len();
        let gp: Vec<NodeId> = self.gen_params.values().iter().map(|t| g.constant(t.clone())).collect();
        let labels = self.labels(&batch.classes)?;
        let fake = self.generator_graph(g, &gp, &batch.z, &labels)?;
        let fake_t = g.value(fake)?.clone();
        let dp = self.critic_params.bind(g);
        let li = g.constant(labels);
        let real = g.constant(batch.real.clone());
        let fake = g.constant(fake_t.clone());
        let d_real = self.critic_graph(g, &dp, real, li)?;
        let d_fake = self.critic_graph(g, &dp, fake, li)?;
        let mr = g.mean(d_real);
        let mf = g.mean(d_fake);
        let gap = g.sub(mr, mf)?;
        let mut qhat = Vec::with_capacity(b * dim);
        for i in 0..b {
            let t = batch.tau[i];
            qhat.extend(
                batch.real.row_slice(i).iter().zip(fake_t.row_slice(i)).map(|(r, f)| (1.0 - t) * r + t * f),
            );
        }
        let pen = gradient_penalty(g, Tensor::new(b, dim, qhat)?, |g, x| self.critic_graph(g, &dp, x, li))?;
        let neg = g.scale(gap, -1.0);
        let weighted = g.scale(pen, self.config.lambda);
        let loss = g.add(neg, weighted)?;
        let w = g.scalar(gap)?;
        let pv = g.scalar(pen)?;
        Ok((loss, dp, w, pv))
    }

    /// Loss values for a batch without updating anything.
    pub fn adversarial_loss(&self, real: &Tensor, z: &Tensor, classes: &[usize], tau: &[f64]) -> Result<AdversarialLosses> {
        if classes.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let batch = Batch {
            real: real.clone(),
            z: z.clone(),
            classes: classes.to_vec(),
            tau: tau.to_vec(),
        };
        let mut g = Graph::new();
        let (loss, _, w, pen) = self.critic_step_graph(&mut g, &batch)?;
        let fake = self.generate_tangents(z, classes)?;
        let d_fake = self.critic_scores(&fake, classes)?;
        Ok(AdversarialLosses {
            critic: g.scalar(loss)?,
            generator: -d_fake.iter().sum::<f64>() / d_fake.len() as f64,
            wasserstein: w,
            penalty: pen,
        })
    }

    fn generator_step(&mut self, batch: &Batch, target: &Tensor, adam: &mut Adam) -> Result<()> {
        let mut g = Graph::new();
        let gp = self.gen_params.bind(&mut g);
        let dp: Vec<NodeId> = self.critic_params.values().iter().map(|t| g.constant(t.clone())).collect();
        let labels = self.labels(&batch.classes)?;
        let fake = self.generator_graph(&mut g, &gp, &batch.z, &labels)?;
        let li = g.constant(labels);
        let d_fake = self.critic_graph(&mut g, &dp, fake, li)?;
        let adv = g.mean(d_fake);
        let adv = g.scale(adv, -self.config.alpha1);
        let t = g.constant(target.clone());
        let diff = g.sub(fake, t)?;
        let l1 = g.l1_norm(diff);
        let lr = g.scale(l1, self.config.alpha2 / batch.classes.len() as f64);
        let loss = g.add(adv, lr)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("generator loss became {value}")));
        }
        let grads = g.grad_or_zeros(loss, &gp)?;
        let grads = grads.iter().map(|&id| g.value(id).cloned()).collect::<Result<Vec<_>>>()?;
        adam.step(&mut self.gen_params, &grads)
    }

    fn matched_l_r(&self, noise: &Tensor, targets: &Tensor, classes: &[usize]) -> Result<f64> {
        let fake = self.generate_tangents(noise, classes)?;
        reconstruction_loss_value(&fake, targets)
    }

    /// Alternating critic and generator Adam updates. Every training sample
    /// keeps one fixed noise row, which defines the matched pairs of the
    /// reconstruction term.
    pub fn train(&mut self, samples: &[MotionSample], mut on_epoch: impl FnMut(&GanEpochLog)) -> Result<GanTrainLog> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training motions".into()));
        }
        let dim = self.tangent_dim();
        let n = samples.len();
        let mut targets = Vec::with_capacity(n * dim);
        for s in samples {
            if s.class >= self.config.classes {
                return Err(Error::InvalidInput(format!("label {} out of range", s.class)));
            }
            if self.reference.distance(&s.point) >= PI - 1e-6 {
                return Err(Error::Singularity("training motion is antipodal to the reference point".into()));
            }
            targets.extend(self.reference.log(&s.point)?.into_data());
        }
        let targets = Tensor::new(n, dim, targets)?;
        let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
        let mut noise_rng = rng::stream(self.config.seed, "gan-matched-noise");
        let noise = Tensor::new(
            n,
            self.config.noise,
            (0..n * self.config.noise).map(|_| noise_rng.sample(StandardNormal)).collect(),
        )?;
        let mut batch_rng = rng::stream(self.config.seed, rng::GAN_BATCHES);
        let mut g_adam = Adam::new(&self.gen_params, self.config.lr);
        let mut d_adam = Adam::new(&self.critic_params, self.config.lr);
        let mut log = GanTrainLog {
            initial_l_r: self.matched_l_r(&noise, &targets, &classes)?,
            epochs: Vec::new(),
        };
        let bsz = self.config.batch.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut batch_rng);
            let (mut w_sum, mut p_sum, mut steps) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(bsz) {
                for _ in 0..self.config.critic_steps {
                    let idx: Vec<usize> = (0..chunk.len()).map(|_| batch_rng.random_range(0..n)).collect();
                    let batch = self.random_batch(&idx, &targets, &classes, &mut batch_rng)?;
                    let mut g = Graph::new();
                    let (loss, dp, w, pen) = self.critic_step_graph(&mut g, &batch)?;
                    if !g.scalar(loss)?.is_finite() {
                        return Err(Error::Diverged(format!("critic loss became non-finite in epoch {epoch}")));
                    }
                    let grads = g.grad_or_zeros(loss, &dp)?;
                    let grads = grads.iter().map(|&id| g.value(id).cloned()).collect::<Result<Vec<_>>>()?;
                    d_adam.step(&mut self.critic_params, &grads)?;
                    w_sum += w;
                    p_sum += pen;
                    steps += 1;
                }
                let batch = Batch {
                    real: gather_rows(&targets, chunk)?,
                    z: gather_rows(&noise, chunk)?,
                    classes: chunk.iter().map(|&i| classes[i]).collect(),
                    tau: Vec::new(),
                };
                let target = batch.real.clone();
                self.generator_step(&batch, &target, &mut g_adam)?;
            }
            let rec = GanEpochLog {
                epoch,
                wasserstein_estimate: w_sum / steps as f64,
                l_r: self.matched_l_r(&noise, &targets, &classes)?,
                penalty: p_sum / steps as f64,
            };
            on_epoch(&rec);
            log.epochs.push(rec);
        }
        Ok(log)
    }

    /// Real rows `idx` with fresh noise and interpolation weights.
    fn random_batch<R: Rng>(&self, idx: &[usize], targets: &Tensor, classes: &[usize], rng: &mut R) -> Result<Batch> {
        let b = idx.len();
        let z = Tensor::new(
            b,
            self.config.noise,
            (0..b * self.config.noise).map(|_| rng.sample(StandardNormal)).collect(),
        )?;
        Ok(Batch {
            real: gather_rows(targets, idx)?,
            z,
            classes: idx.iter().map(|&i| classes[i]).collect(),
            tau: (0..b).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), t.cols(), data)
}
