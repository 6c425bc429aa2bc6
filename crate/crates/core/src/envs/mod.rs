//! Experiment-generating processes.
//!
//! Every environment implements [`Environment`] and is constructed by name
//! from a TOML parameter table through [`registry`].

mod ces;
mod sir;
mod source;
mod toy;

pub use ces::Ces;
pub use sir::{integrate_sir, integrate_sir_states, log_rho_prior, simulate_sir_bank, Sir, SirParams, SimBank, LOG_BETA_PRIOR};
pub use source::SourceLocation;
pub use toy::{DiscreteToy, DiscreteToySpec, ToyGenerator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{FeatureMap, History};
use crate::registry::Registry;
use crate::rng::StreamRng;

/// Static description of a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_models: usize,
    pub theta_dims: Vec<usize>,
    pub eta_dims: Vec<usize>,
    pub z_dims: Vec<usize>,
    pub n_d: usize,
    pub n_y: usize,
    pub design_lower: Vec<f64>,
    pub design_upper: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn has_nuisance(&self) -> bool {
        self.eta_dims.iter().any(|d| *d > 0)
    }

    pub fn has_qoi(&self) -> bool {
        self.z_dims.iter().any(|d| *d > 0)
    }

    pub fn check_design(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.n_d {
            return Err(crate::error::dim_err(format!("design of length {} (expected {})", d.len(), self.n_d)));
        }
        for (i, &v) in d.iter().enumerate() {
            if !(v >= self.design_lower[i] && v <= self.design_upper[i]) {
                return Err(Error::InvalidParameter(format!(
                    "design component {i} = {v} outside [{}, {}]",
                    self.design_lower[i], self.design_upper[i]
                )));
            }
        }
        Ok(())
    }
}

/// The generating sample of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Zero-based model index.
    pub model: usize,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub z: Vec<f64>,
    /// Row of a simulation bank backing this truth, if any.
    pub sim_index: Option<usize>,
}

/// Inference target of a posterior predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Model,
    Theta,
    Z,
}

/// Output ranges of a mixture posterior for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRange {
    pub mean_lo: Vec<f64>,
    pub mean_hi: Vec<f64>,
    pub std_lo: Vec<f64>,
    pub std_hi: Vec<f64>,
    pub bounds: Vec<Option<(f64, f64)>>,
}

impl PosteriorRange {
    pub fn uniform(dim: usize, mean: (f64, f64), std: (f64, f64)) -> Self {
        Self {
            mean_lo: vec![mean.0; dim],
            mean_hi: vec![mean.1; dim],
            std_lo: vec![std.0; dim],
            std_hi: vec![std.1; dim],
            bounds: vec![None; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean_lo.len()
    }
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;

    fn spec(&self) -> &EnvSpec;

    /// Draw `(m, theta, eta)` from the prior and compute `z`.
    fn sample_prior(&self, rng: &mut StreamRng) -> GroundTruth;

    /// Draw `(theta, eta)` from the prior of a fixed model.
    fn sample_parameters(&self, model: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>);

    fn observe(&self, truth: &GroundTruth, d: &[f64], history: &History, rng: &mut StreamRng) -> Result<Vec<f64>>;

    fn predict_qoi(&self, _model: usize, _theta: &[f64], _eta: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!("{} defines no predictive quantity", self.name())))
    }

    fn log_prior_model(&self, _model: usize) -> f64 {
        -(self.spec().n_models as f64).ln()
    }

    /// Log prior density of `theta`, when available in closed form.
    fn log_prior_theta(&self, _model: usize, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Log prior density of `z`, when available in closed form.
    fn log_prior_z(&self, _model: usize, _z: &[f64]) -> Option<f64> {
        None
    }

    /// `ln p(y | m, theta, eta, d, history)` for explicit-likelihood problems.
    fn log_likelihood(
        &self,
        _model: usize,
        _theta: &[f64],
        _eta: &[f64],
        _d: &[f64],
        _y: &[f64],
        _history: &History,
    ) -> Option<f64> {
        None
    }

    fn features(&self) -> FeatureMap;

    /// Target-specific output ranges for mixture posteriors.
    fn posterior_range(&self, target: Target, model: usize) -> Option<PosteriorRange>;

    /// Reward contribution not derived from information gain.
    fn non_ig_reward(&self, _k: usize, _history: &History, _d: &[f64], _y: &[f64]) -> f64 {
        0.0
    }

    /// Finite tabulated form, for problems the oracle can enumerate.
    fn as_discrete(&self) -> Option<&DiscreteToy> {
        None
    }
}

pub type EnvConstructor = fn(&toml::Table) -> Result<Box<dyn Environment>>;

/// All built-in environments.
pub fn registry() -> Registry<EnvConstructor> {
    let mut r: Registry<EnvConstructor> = Registry::new("environment");
    r.register("source_location", |t| Ok(Box::new(SourceLocation::from_table(t)?)))
        .register("ces", |t| Ok(Box::new(Ces::from_table(t)?)))
        .register("sir", |t| Ok(Box::new(Sir::from_table(t)?)))
        .register("discrete_toy", |t| Ok(Box::new(DiscreteToy::from_table(t)?)));
    r
}

pub fn build(name: &str, params: &toml::Table) -> Result<Box<dyn Environment>> {
    (registry().get(name)?)(params)
}

/// Read an optional typed field from a parameter table.
pub(crate) fn field<T: serde::de::DeserializeOwned>(t: &toml::Table, key: &str, default: T) -> Result<T> {
    match t.get(key) {
        None => Ok(default),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("environment field `{key}`: {e}"))),
    }
}

/// Reject keys outside `allowed`.
pub(crate) fn check_keys(t: &toml::Table, allowed: &[&str], env: &str) -> Result<()> {
    let bad: Vec<&str> = t.keys().map(|k| k.as_str()).filter(|k| !allowed.contains(k)).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown {env} fields: {}", bad.join(", "))))
    }
}
