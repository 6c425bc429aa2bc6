use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{dim_err, Result};

/// Adam with an exponential learning-rate decay advanced once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    epoch: u64,
    #[serde(skip)]
    m: Vec<Vec<f64>>,
    #[serde(skip)]
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self { lr, decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, epoch: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr * self.decay.powi(self.epoch as i32)
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// First and second moment buffers, empty before the first step.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, epoch: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(dim_err("adam moment buffers disagree in shape"));
        }
        self.step = step;
        self.epoch = epoch;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One descent step `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &G) -> Result<()> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if gs.len() != ps.len() || gs.iter().zip(&ps).any(|(g, p)| g.len() != p.len()) {
            return Err(dim_err("gradient and parameter shapes differ"));
        }
        if self.m.is_empty() {
            self.m = ps.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != ps.len() || self.m.iter().zip(&ps).any(|(m, p)| m.len() != p.len()) {
            return Err(dim_err("optimizer state was built for different parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.effective_lr();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in ps.iter_mut().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Vec<f64>);

    impl ParamSet for Scalar {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut p = Scalar(vec![0.3, -1.2]);
        let g = Scalar(vec![0.0, 0.0]);
        let mut opt = Adam::new(1e-3, 0.9999);
        for _ in 0..1000 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.0, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Scalar(vec![1.0]);
        let mut opt = Adam::new(1e-3, 1.0);
        opt.step(&mut p, &Scalar(vec![1.0])).unwrap();
        // m_hat = 1, v_hat = 1, so the move is lr / (1 + eps).
        assert!((p.0[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_per_epoch() {
        let mut opt = Adam::new(1e-3, 0.9999);
        for _ in 0..10_000 {
            opt.advance_epoch();
        }
        // 1e-3 * 0.9999^10000 evaluated in high precision.
        assert!((opt.effective_lr() - 3.678_610_464_329_299e-4).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Adam::new(1e-3, 1.0);
        assert!(opt.step(&mut Scalar(vec![0.0]), &Scalar(vec![0.0, 1.0])).is_err());
    }
}
