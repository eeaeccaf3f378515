use std::f64::consts::PI;

use super::srvf::{weighted_dot, Srvf};
use crate::error::{Error, Result};

/// Points closer than this (in radians) are treated as coincident.
const COINCIDENT: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;

/// A unit-norm SRVF together with the norm removed when it was normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePoint {
    srvf: Srvf,
    scale: f64,
}

impl SpherePoint {
    pub fn new(srvf: Srvf, scale: f64) -> Result<Self> {
        let norm = srvf.norm();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!(
                "sphere point must have unit norm, got {norm}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        Ok(SpherePoint { srvf, scale })
    }

    /// Renormalizes `srvf` (which must already be close to unit norm) to
    /// absorb rounding drift.
    pub(crate) fn renormalized(srvf: Srvf, scale: f64) -> Result<Self> {
        let norm = srvf.norm();
        if !(norm > 0.0) {
            return Err(Error::DegenerateMotion("zero vector has no direction".into()));
        }
        let unit = srvf.with_samples(srvf.samples().iter().map(|v| v / norm).collect());
        SpherePoint::new(unit, scale)
    }

    pub fn srvf(&self) -> &Srvf {
        &self.srvf
    }

    pub fn samples(&self) -> &[f64] {
        self.srvf.samples()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        SpherePoint::new(self.srvf.clone(), scale)
    }

    pub fn dim(&self) -> usize {
        self.srvf.dim()
    }

    pub fn dt(&self) -> f64 {
        self.srvf.dt()
    }

    pub fn inner(&self, other: &SpherePoint) -> f64 {
        self.srvf.inner(&other.srvf)
    }

    /// Geodesic distance `arccos <self, other>` in `[0, pi]`.
    pub fn distance(&self, other: &SpherePoint) -> f64 {
        self.inner(other).clamp(-1.0, 1.0).acos()
    }

    pub fn log(&self, q: &SpherePoint) -> Result<TangentVector> {
        self.srvf.same_layout(&q.srvf)?;
        let cos = self.inner(q).clamp(-1.0, 1.0);
        let d = cos.acos();
        let dim = self.dim();
        if d < COINCIDENT {
            return Ok(TangentVector {
                data: vec![0.0; dim],
                base: self.clone(),
            });
        }
        if PI - d < 1e-9 {
            return Err(Error::Singularity(format!(
                "log map undefined at antipodal point (distance {d})"
            )));
        }
        let factor = d / d.sin();
        let p = self.samples();
        let mut data: Vec<f64> = q
            .samples()
            .iter()
            .zip(p)
            .map(|(qi, pi)| factor * (qi - cos * pi))
            .collect();
        // remove the rounding-level normal component
        let normal = weighted_dot(&data, p, self.dt());
        for (v, pi) in data.iter_mut().zip(p) {
            *v -= normal * pi;
        }
        Ok(TangentVector {
            data,
            base: self.clone(),
        })
    }

    pub fn exp(&self, s: &TangentVector) -> Result<SpherePoint> {
        if s.data.len() != self.dim() {
            return Err(Error::Shape(format!(
                "tangent vector has {} entries, base point has {}",
                s.data.len(),
                self.dim()
            )));
        }
        self.exp_raw(&s.data)
    }

    /// Exponential map for a raw coordinate vector assumed tangent at `self`.
    pub(crate) fn exp_raw(&self, s: &[f64]) -> Result<SpherePoint> {
        let n = weighted_dot(s, s, self.dt()).sqrt();
        if n < COINCIDENT {
            return Ok(self.clone());
        }
        let (sin, cos) = n.sin_cos();
        let samples = self
            .samples()
            .iter()
            .zip(s)
            .map(|(p, v)| cos * p + sin * v / n)
            .collect();
        SpherePoint::renormalized(self.srvf.with_samples(samples), self.scale)
    }
}

/// Element of the tangent space of the sphere at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    data: Vec<f64>,
    base: SpherePoint,
}

impl TangentVector {
    /// Projects `data` onto the tangent space at `base`.
    pub fn project(base: &SpherePoint, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != base.dim() {
            return Err(Error::Shape(format!(
                "tangent data has {} entries, base point has {}",
                data.len(),
                base.dim()
            )));
        }
        let normal = weighted_dot(&data, base.samples(), base.dt());
        for (v, p) in data.iter_mut().zip(base.samples()) {
            *v -= normal * p;
        }
        Ok(TangentVector {
            data,
            base: base.clone(),
        })
    }

    pub fn zero(base: &SpherePoint) -> Self {
        TangentVector {
            data: vec![0.0; base.dim()],
            base: base.clone(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        weighted_dot(&self.data, &self.data, self.base.dt()).sqrt()
    }

    /// Inner product with the base point; zero up to rounding for a tangent vector.
    pub fn normal_component(&self) -> f64 {
        weighted_dot(&self.data, self.base.samples(), self.base.dt())
    }
}

pub fn sphere_distance(a: &SpherePoint, b: &SpherePoint) -> f64 {
    a.distance(b)
}

pub fn log_map(p: &SpherePoint, q: &SpherePoint) -> Result<TangentVector> {
    p.log(q)
}

pub fn exp_map(p: &SpherePoint, s: &TangentVector) -> Result<SpherePoint> {
    p.exp(s)
}

/// Great-circle interpolation `psi(tau)` between two sphere points. Scales are
/// interpolated linearly.
pub fn geodesic_interpolate(q1: &SpherePoint, q2: &SpherePoint, tau: f64) -> Result<SpherePoint> {
    q1.srvf.same_layout(&q2.srvf)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("tau must lie in [0, 1], got {tau}")));
    }
    if tau == 0.0 {
        return Ok(q1.clone());
    }
    if tau == 1.0 {
        return Ok(q2.clone());
    }
    let theta = q1.distance(q2);
    let scale = (1.0 - tau) * q1.scale + tau * q2.scale;
    if theta < COINCIDENT {
        return q1.with_scale(scale);
    }
    if PI - theta < 1e-9 {
        return Err(Error::Singularity(
            "geodesic between antipodal points is not unique".into(),
        ));
    }
    let sin = theta.sin();
    let a = ((1.0 - tau) * theta).sin() / sin;
    let b = (tau * theta).sin() / sin;
    let samples = q1
        .samples()
        .iter()
        .zip(q2.samples())
        .map(|(x, y)| a * x + b * y)
        .collect();
    SpherePoint::renormalized(q1.srvf.with_samples(samples), scale)
}

/// Arithmetic mean of the points projected back onto the sphere.
pub fn extrinsic_mean(points: &[SpherePoint]) -> Result<SpherePoint> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidInput("mean of an empty set".into()))?;
    let mut acc = vec![0.0; first.dim()];
    let mut scale = 0.0;
    for p in points {
        first.srvf.same_layout(&p.srvf)?;
        for (a, v) in acc.iter_mut().zip(p.samples()) {
            *a += v;
        }
        scale += p.scale;
    }
    let n = points.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    SpherePoint::renormalized(first.srvf.with_samples(acc), scale / n)
}

/// Intrinsic (Karcher) mean by the fixed-point iteration
/// `mu <- exp_mu(mean_i log_mu(x_i))`, started from the extrinsic mean.
pub fn karcher_mean(points: &[SpherePoint], tol: f64, max_iter: usize) -> Result<SpherePoint> {
    let mut mu = extrinsic_mean(points)?;
    let n = points.len() as f64;
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let mut step = vec![0.0; mu.dim()];
        for p in points {
            let v = mu.log(p)?;
            for (s, x) in step.iter_mut().zip(v.data()) {
                *s += x / n;
            }
        }
        residual = weighted_dot(&step, &step, mu.dt()).sqrt();
        if residual < tol {
            return Ok(mu);
        }
        mu = mu.exp_raw(&step)?;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
        last: mu.samples().to_vec(),
    })
}
