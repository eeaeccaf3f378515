//! Landmark trajectories, their square-root velocity encoding, and the
//! geometry of the unit hypersphere those encodings live on.

mod csv;
mod sphere;
mod srvf;

pub use self::csv::{
    format_sequence_csv, parse_sequence_csv, read_frame_csv, read_sequence_csv, write_frame_csv, write_sequence_csv,
};
pub use self::sphere::{
    exp_map, extrinsic_mean, geodesic_interpolate, karcher_mean, log_map, sphere_distance,
    SpherePoint, TangentVector,
};
pub use self::srvf::{
    normalize_motion, sequence_to_sparse_displacements, srvf_decode, srvf_decode_with,
    srvf_encode, srvf_normalize, DecodeOptions, MotionNormalization, Srvf,
};

use crate::error::{Error, Result};

/// One time sample of `k` 3D landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<[f64; 3]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("landmark frame needs k >= 1 points".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkFrame { points })
    }

    pub fn zeros(k: usize) -> Self {
        LandmarkFrame {
            points: vec![[0.0; 3]; k],
        }
    }

    pub fn from_flat(k: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * k {
            return Err(Error::Shape(format!(
                "expected {} coordinates for k={k}, got {}",
                3 * k,
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        LandmarkFrame {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    pub(crate) fn check_k(&self, k: usize) -> Result<()> {
        if self.k() != k {
            return Err(Error::Shape(format!(
                "landmark count mismatch: expected {k}, got {}",
                self.k()
            )));
        }
        Ok(())
    }
}

/// A uniformly parameterized landmark trajectory over `[0, 1]` with `T >= 2`
/// frames, all sharing the same landmark count.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSequence {
    frames: Vec<LandmarkFrame>,
}

impl LandmarkSequence {
    pub fn new(frames: Vec<LandmarkFrame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a landmark sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let k = frames[0].k();
        for (t, f) in frames.iter().enumerate() {
            if f.k() != k {
                return Err(Error::Shape(format!(
                    "frame {t} has {} landmarks, frame 0 has {k}",
                    f.k()
                )));
            }
        }
        Ok(LandmarkSequence { frames })
    }

    pub fn frames(&self) -> &[LandmarkFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<LandmarkFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn k(&self) -> usize {
        self.frames[0].k()
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.frames.len() - 1) as f64
    }

    pub fn first(&self) -> &LandmarkFrame {
        &self.frames[0]
    }

    /// Largest absolute coordinate difference against another sequence of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &LandmarkSequence) -> Result<f64> {
        if self.len() != other.len() || self.k() != other.k() {
            return Err(Error::Shape(format!(
                "sequence shapes differ: {}x{} vs {}x{}",
                self.len(),
                self.k(),
                other.len(),
                other.k()
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            for (p, q) in a.points.iter().zip(&b.points) {
                for c in 0..3 {
                    worst = worst.max((p[c] - q[c]).abs());
                }
            }
        }
        Ok(worst)
    }
}
