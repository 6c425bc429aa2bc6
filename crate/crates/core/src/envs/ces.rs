use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use super::{check_keys, field, EnvSpec, Environment, GroundTruth, PosteriorRange, Target};
use crate::error::{Error, Result};
use crate::history::{FeatureMap, History, ObsTransform};
use crate::nn::sigmoid;
use crate::prob::{normal_logpdf, std_normal_log_sf};
use crate::rng::StreamRng;

/// Constant elasticity of substitution preference model.
///
/// `theta = (rho, beta_1, beta_2, ln u)` with `beta_3 = 1 - beta_1 - beta_2`.
/// A design is a pair of baskets `(x, x')`, each with three goods.
#[derive(Clone, Debug)]
pub struct Ces {
    pub tau: f64,
    pub clip_eps: f64,
    pub log_u_mean: f64,
    pub log_u_std: f64,
    spec: EnvSpec,
}

impl Ces {
    pub fn new(horizon: usize) -> Self {
        Self {
            tau: 0.005,
            clip_eps: 2f64.powi(-22),
            log_u_mean: 1.0,
            log_u_std: 3.0,
            spec: EnvSpec {
                n_models: 1,
                theta_dims: vec![4],
                eta_dims: vec![0],
                z_dims: vec![0],
                n_d: 6,
                n_y: 1,
                design_lower: vec![0.0; 6],
                design_upper: vec![100.0; 6],
                horizon,
            },
        }
    }

    pub fn from_table(t: &toml::Table) -> Result<Self> {
        check_keys(t, &["horizon", "tau"], "ces")?;
        let mut env = Self::new(field(t, "horizon", 10)?);
        env.tau = field(t, "tau", env.tau)?;
        if !(env.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(env)
    }

    fn betas(theta: &[f64]) -> [f64; 3] {
        [theta[1], theta[2], 1.0 - theta[1] - theta[2]]
    }

    /// CES utility of one basket.
    pub fn utility(rho: f64, beta: &[f64; 3], x: &[f64]) -> f64 {
        let s: f64 = x.iter().zip(beta).map(|(xi, bi)| xi.powf(rho) * bi).sum();
        if s <= 0.0 {
            0.0
        } else {
            s.powf(1.0 / rho)
        }
    }

    /// Mean and standard deviation of the latent logit.
    pub fn latent(&self, theta: &[f64], d: &[f64]) -> (f64, f64) {
        let rho = theta[0];
        let beta = Self::betas(theta);
        let u = theta[3].exp();
        let (x, xp) = d.split_at(3);
        let mean = u * (Self::utility(rho, &beta, x) - Self::utility(rho, &beta, xp));
        let dist = x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (mean, self.tau * u * (1.0 + dist))
    }
}

impl Environment for Ces {
    fn name(&self) -> &'static str {
        "ces"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> GroundTruth {
        let (theta, eta) = self.sample_parameters(0, rng);
        GroundTruth { model: 0, theta, eta, z: Vec::new(), sim_index: None }
    }

    fn sample_parameters(&self, _model: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let rho: f64 = rng.random();
        let e: [f64; 3] = [rng.sample(Exp1), rng.sample(Exp1), rng.sample(Exp1)];
        let total: f64 = e.iter().sum();
        let n: f64 = rng.sample(StandardNormal);
        (vec![rho, e[0] / total, e[1] / total, self.log_u_mean + self.log_u_std * n], Vec::new())
    }

    fn observe(&self, truth: &GroundTruth, d: &[f64], _h: &History, rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.spec.check_design(d)?;
        let (mean, std) = self.latent(&truth.theta, d);
        let e: f64 = rng.sample(StandardNormal);
        let y = sigmoid(mean + std * e).clamp(self.clip_eps, 1.0 - self.clip_eps);
        Ok(vec![y])
    }

    fn log_prior_theta(&self, _model: usize, theta: &[f64]) -> Option<f64> {
        let b = Self::betas(theta);
        let inside = (0.0..=1.0).contains(&theta[0]) && b.iter().all(|v| *v >= 0.0);
        if !inside {
            return Some(f64::NEG_INFINITY);
        }
        Some(2f64.ln() + normal_logpdf(theta[3], self.log_u_mean, self.log_u_std))
    }

    /// Censored logit-normal likelihood: point masses at the clip values,
    /// a density in between.
    fn log_likelihood(&self, _m: usize, theta: &[f64], _eta: &[f64], d: &[f64], y: &[f64], _h: &History) -> Option<f64> {
        let (mean, std) = self.latent(theta, d);
        let (lo, hi) = (self.clip_eps, 1.0 - self.clip_eps);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let v = y[0];
        Some(if v <= lo {
            std_normal_log_sf(-(logit(lo) - mean) / std)
        } else if v >= hi {
            std_normal_log_sf((logit(hi) - mean) / std)
        } else {
            normal_logpdf(logit(v), mean, std) - (v * (1.0 - v)).ln()
        })
    }

    fn features(&self) -> FeatureMap {
        FeatureMap::for_box(&self.spec.design_lower, &self.spec.design_upper, ObsTransform::Identity, vec![0.5], vec![0.5])
    }

    fn posterior_range(&self, target: Target, _model: usize) -> Option<PosteriorRange> {
        match target {
            Target::Theta => Some(PosteriorRange {
                mean_lo: vec![-1.0, -1.0, -1.0, -17.0],
                mean_hi: vec![2.0, 2.0, 2.0, 19.0],
                std_lo: vec![1e-5; 4],
                std_hi: vec![3.0; 4],
                bounds: vec![Some((0.0, 1.0)), Some((0.0, 1.0)), Some((0.0, 1.0)), None],
            }),
            _ => None,
        }
    }
}
