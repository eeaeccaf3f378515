use super::{LandmarkFrame, LandmarkSequence, SpherePoint};
use crate::error::{Error, Result};
use crate::mesh::SparseDisplacement;

/// Discretized square-root velocity function: `T - 1` samples of `R^{k x 3}`
/// taken on the interval midpoints of a `T`-frame trajectory, stored flat
/// (sample-major, then landmark, then axis).
#[derive(Clone, Debug, PartialEq)]
pub struct Srvf {
    samples: Vec<f64>,
    k: usize,
    dt: f64,
}

impl Srvf {
    pub fn from_samples(samples: Vec<f64>, k: usize, frames: usize) -> Result<Self> {
        if k == 0 || frames < 2 {
            return Err(Error::InvalidInput(format!(
                "srvf needs k >= 1 and at least 2 frames (k={k}, frames={frames})"
            )));
        }
        if samples.len() != (frames - 1) * k * 3 {
            return Err(Error::Shape(format!(
                "srvf for {frames} frames of {k} landmarks needs {} values, got {}",
                (frames - 1) * k * 3,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite srvf sample".into()));
        }
        Ok(Srvf {
            samples,
            k,
            dt: 1.0 / (frames - 1) as f64,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len() / (3 * self.k)
    }

    pub fn frame_count(&self) -> usize {
        self.sample_count() + 1
    }

    pub fn dim(&self) -> usize {
        self.samples.len()
    }

    /// `<a, b> = sum_t <a(t), b(t)> dt`
    pub fn inner(&self, other: &Srvf) -> f64 {
        debug_assert_eq!(self.samples.len(), other.samples.len());
        weighted_dot(&self.samples, &other.samples, self.dt)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub(crate) fn same_layout(&self, other: &Srvf) -> Result<()> {
        if self.k != other.k || self.samples.len() != other.samples.len() {
            return Err(Error::Shape(format!(
                "srvf layouts differ: {}x{} vs {}x{}",
                self.sample_count(),
                self.k,
                other.sample_count(),
                other.k
            )));
        }
        Ok(())
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Srvf {
        debug_assert_eq!(samples.len(), self.samples.len());
        Srvf {
            samples,
            k: self.k,
            dt: self.dt,
        }
    }

    /// Integrates `|g q(s)| g q(s)` from `initial` with amplitude `g = scale`.
    pub fn decode(&self, initial: &LandmarkFrame, scale: f64) -> Result<LandmarkSequence> {
        initial.check_k(self.k)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("decode scale must be positive, got {scale}")));
        }
        let width = 3 * self.k;
        let mut current = initial.flat();
        let mut frames = Vec::with_capacity(self.frame_count());
        frames.push(initial.clone());
        for sample in self.samples.chunks_exact(width) {
            let speed = scale * sample.iter().map(|v| v * v).sum::<f64>().sqrt();
            let step = speed * scale * self.dt;
            for (c, q) in current.iter_mut().zip(sample) {
                *c += step * q;
            }
            frames.push(LandmarkFrame::from_flat(self.k, &current)?);
        }
        LandmarkSequence::new(frames)
    }
}

pub(crate) fn weighted_dot(a: &[f64], b: &[f64], dt: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * dt
}

/// Encodes a trajectory with forward-difference velocities
/// `v_t = (frame_{t+1} - frame_t) / dt` and `q_t = v_t / sqrt(|v_t|)`.
/// Zero velocity maps to a zero sample.
pub fn srvf_encode(seq: &LandmarkSequence) -> Result<Srvf> {
    let k = seq.k();
    let dt = seq.dt();
    let width = 3 * k;
    let mut samples = Vec::with_capacity((seq.len() - 1) * width);
    let mut velocity = vec![0.0; width];
    for pair in seq.frames().windows(2) {
        let (a, b) = (pair[0].points(), pair[1].points());
        for (j, (p, q)) in a.iter().zip(b).enumerate() {
            for c in 0..3 {
                velocity[3 * j + c] = (q[c] - p[c]) / dt;
            }
        }
        let speed = velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !speed.is_finite() {
            return Err(Error::InvalidInput("non-finite velocity in sequence".into()));
        }
        if speed == 0.0 {
            samples.extend(std::iter::repeat_n(0.0, width));
        } else {
            let s = speed.sqrt();
            samples.extend(velocity.iter().map(|v| v / s));
        }
    }
    Srvf::from_samples(samples, k, seq.len())
}

/// Scales an SRVF to unit norm, remembering the removed norm.
pub fn srvf_normalize(q: &Srvf) -> Result<SpherePoint> {
    let norm = q.norm();
    if !(norm > 0.0) || norm < 1e-300 {
        return Err(Error::DegenerateMotion(
            "srvf has zero norm (static motion cannot be placed on the sphere)".into(),
        ));
    }
    let unit = q.with_samples(q.samples.iter().map(|v| v / norm).collect());
    SpherePoint::new(unit, norm)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Translate the whole output so the first frame's centroid sits at the origin.
    pub recenter: bool,
}

pub fn srvf_decode(point: &SpherePoint, initial: &LandmarkFrame, scale: f64) -> Result<LandmarkSequence> {
    point.srvf().decode(initial, scale)
}

pub fn srvf_decode_with(
    point: &SpherePoint,
    initial: &LandmarkFrame,
    scale: f64,
    options: DecodeOptions,
) -> Result<LandmarkSequence> {
    let seq = srvf_decode(point, initial, scale)?;
    if !options.recenter {
        return Ok(seq);
    }
    let c = seq.first().centroid();
    let offset = [-c[0], -c[1], -c[2]];
    LandmarkSequence::new(seq.frames().iter().map(|f| f.translated(offset)).collect())
}

/// Per-sequence preprocessing applied before SRVF encoding of training motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionNormalization {
    /// Raw coordinates.
    None,
    /// Translate by the first frame's centroid and divide every frame by the
    /// Frobenius norm of the centered first frame.
    #[default]
    CenterUnitNorm,
}

/// Returns the normalized sequence and the factor that maps normalized
/// displacements back to input units.
pub fn normalize_motion(seq: &LandmarkSequence, mode: MotionNormalization) -> Result<(LandmarkSequence, f64)> {
    match mode {
        MotionNormalization::None => Ok((seq.clone(), 1.0)),
        MotionNormalization::CenterUnitNorm => {
            let c = seq.first().centroid();
            let norm = seq
                .first()
                .points()
                .iter()
                .map(|p| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !(norm > 0.0) {
                return Err(Error::InvalidInput(
                    "first frame collapses to a point; cannot normalize".into(),
                ));
            }
            let frames = seq
                .frames()
                .iter()
                .map(|f| {
                    LandmarkFrame::new(
                        f.points()
                            .iter()
                            .map(|p| [(p[0] - c[0]) / norm, (p[1] - c[1]) / norm, (p[2] - c[2]) / norm])
                            .collect(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((LandmarkSequence::new(frames)?, norm))
        }
    }
}

/// `d_t = frame_t - neutral` for every frame.
pub fn sequence_to_sparse_displacements(
    seq: &LandmarkSequence,
    neutral: &LandmarkFrame,
) -> Result<Vec<SparseDisplacement>> {
    neutral.check_k(seq.k())?;
    seq.frames()
        .iter()
        .map(|f| {
            let values = f
                .points()
                .iter()
                .zip(neutral.points())
                .map(|(p, n)| [p[0] - n[0], p[1] - n[1], p[2] - n[2]])
                .collect();
            SparseDisplacement::new(values)
        })
        .collect()
}
