use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters ({} moment slots)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() || params.get(i).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {} has shape {:?}, parameter {:?}",
                    params.name(i),
                    g.shape(),
                    params.get(i).shape()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut p = ParamStore::default();
        p.add("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = one_param(1.5);
        let mut adam = Adam::new(&p, 1e-3);
        adam.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.get(0).item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, 1e-3);
        adam.step(&mut p, &[Tensor::scalar(-4.0)]).unwrap();
        assert!((p.get(0).item() - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimise (x - 3)^2 from 0
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, 1e-2);
        let mut steps = 0;
        while (p.get(0).item() - 3.0).abs() >= 1e-6 {
            let g = 2.0 * (p.get(0).item() - 3.0);
            adam.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            steps += 1;
            assert!(steps <= 5000, "x = {}", p.get(0).item());
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p, 1e-2);
        assert!(adam.step(&mut p, &[Tensor::zeros(1, 2)]).is_err());
        assert!(adam.step(&mut p, &[]).is_err());
    }
}
