use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_keys, field, EnvSpec, Environment, GroundTruth, PosteriorRange, Target};
use crate::error::{Error, Result};
use crate::history::{FeatureMap, History, ObsTransform};
use crate::prob::{normal_logpdf, DENSITY_FLOOR, LN_SQRT_2PI};
use crate::rng::StreamRng;

/// Point sources in the plane observed through a log-normal intensity sensor.
///
/// Model `i` has `source_counts[i]` sources; `theta` stores their
/// coordinates as `[x_1, y_1, x_2, y_2, ...]`. The predictive quantity is the
/// log magnitude of the flux through the vertical wall `x = wall_x`.
#[derive(Clone, Debug)]
pub struct SourceLocation {
    pub source_counts: Vec<usize>,
    pub background: f64,
    pub max_signal: f64,
    pub noise_std: f64,
    pub wall_x: f64,
    pub movement_penalty: f64,
    spec: EnvSpec,
}

impl SourceLocation {
    pub fn new(source_counts: Vec<usize>, horizon: usize, bound: f64) -> Result<Self> {
        if source_counts.is_empty() || source_counts.contains(&0) {
            return Err(Error::Config("source_counts must list positive counts".into()));
        }
        let spec = EnvSpec {
            n_models: source_counts.len(),
            theta_dims: source_counts.iter().map(|c| 2 * c).collect(),
            eta_dims: vec![0; source_counts.len()],
            z_dims: vec![1; source_counts.len()],
            n_d: 2,
            n_y: 1,
            design_lower: vec![-bound; 2],
            design_upper: vec![bound; 2],
            horizon,
        };
        Ok(Self {
            source_counts,
            background: 0.1,
            max_signal: 1e-4,
            noise_std: 0.5,
            wall_x: 6.0,
            movement_penalty: 0.0,
            spec,
        })
    }

    pub fn from_table(t: &toml::Table) -> Result<Self> {
        check_keys(
            t,
            &["source_counts", "horizon", "bound", "background", "max_signal", "noise_std", "wall_x", "movement_penalty"],
            "source_location",
        )?;
        let mut env = Self::new(field(t, "source_counts", vec![2])?, field(t, "horizon", 5)?, field(t, "bound", 4.0)?)?;
        env.background = field(t, "background", env.background)?;
        env.max_signal = field(t, "max_signal", env.max_signal)?;
        env.noise_std = field(t, "noise_std", env.noise_std)?;
        env.wall_x = field(t, "wall_x", env.wall_x)?;
        env.movement_penalty = field(t, "movement_penalty", env.movement_penalty)?;
        if !(env.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        Ok(env)
    }

    /// Total intensity `bg + sum_i 1 / (max + |theta_i - d|^2)`.
    pub fn intensity(&self, theta: &[f64], d: &[f64]) -> f64 {
        self.background
            + theta
                .chunks(2)
                .map(|s| {
                    let dx = s[0] - d[0];
                    let dy = s[1] - d[1];
                    1.0 / (self.max_signal + dx * dx + dy * dy)
                })
                .sum::<f64>()
    }

    /// Flux through the wall `x = wall_x`, integrated over the wall.
    pub fn flux(&self, theta: &[f64]) -> f64 {
        theta
            .chunks(2)
            .map(|s| {
                let r = s[0] - self.wall_x;
                -std::f64::consts::PI * r / (self.max_signal + r * r).powf(1.5)
            })
            .sum()
    }
}

impl Environment for SourceLocation {
    fn name(&self) -> &'static str {
        "source_location"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> GroundTruth {
        let model = rng.random_range(0..self.spec.n_models);
        let (theta, eta) = self.sample_parameters(model, rng);
        let z = self.predict_qoi(model, &theta, &eta).expect("flux is defined for every model");
        GroundTruth { model, theta, eta, z, sim_index: None }
    }

    fn sample_parameters(&self, model: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let theta = (0..self.spec.theta_dims[model]).map(|_| rng.sample(StandardNormal)).collect();
        (theta, Vec::new())
    }

    fn observe(&self, truth: &GroundTruth, d: &[f64], _history: &History, rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.spec.check_design(d)?;
        let mu = self.intensity(&truth.theta, d);
        let e: f64 = rng.sample(StandardNormal);
        Ok(vec![(mu.ln() + self.noise_std * e).exp()])
    }

    fn predict_qoi(&self, _model: usize, theta: &[f64], _eta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![(self.flux(theta).abs() + DENSITY_FLOOR).ln()])
    }

    fn log_prior_theta(&self, _model: usize, theta: &[f64]) -> Option<f64> {
        Some(theta.iter().map(|t| -LN_SQRT_2PI - 0.5 * t * t).sum())
    }

    fn log_likelihood(&self, _m: usize, theta: &[f64], _eta: &[f64], d: &[f64], y: &[f64], _h: &History) -> Option<f64> {
        let ly = y[0].ln();
        Some(normal_logpdf(ly, self.intensity(theta, d).ln(), self.noise_std) - ly)
    }

    fn features(&self) -> FeatureMap {
        FeatureMap::for_box(&self.spec.design_lower, &self.spec.design_upper, ObsTransform::Ln, vec![1.0], vec![3.0])
    }

    fn posterior_range(&self, target: Target, model: usize) -> Option<PosteriorRange> {
        match target {
            Target::Theta => Some(PosteriorRange::uniform(self.spec.theta_dims[model], (-6.0, 6.0), (1e-5, 1.0))),
            Target::Z => Some(PosteriorRange::uniform(1, (-6.0, 6.0), (1e-5, 2.0))),
            Target::Model => None,
        }
    }

    fn non_ig_reward(&self, k: usize, history: &History, d: &[f64], _y: &[f64]) -> f64 {
        if self.movement_penalty == 0.0 || k == 0 {
            return 0.0;
        }
        let prev = history.design(k - 1);
        let dist = prev.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        -self.movement_penalty * dist
    }
}
