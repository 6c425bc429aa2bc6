//! Variational posterior predictors.
//!
//! A predictor maps an encoded history to a distribution over one target:
//! the model index ([`ModelPosteriorNet`]) or a continuous vector through any
//! [`DensityPredictor`]. Continuous families are built by name from
//! [`registry`].

mod flow;
mod gmm;
mod model;
mod bank;

pub use flow::FlowNet;
pub use gmm::GmmNet;
pub use model::ModelPosteriorNet;
pub use bank::{BankConfig, Predictor, PredictorBank, Slot};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::PosteriorRange;
use crate::error::Result;
use crate::nn::{DenseNet, NetGrad, ParamSet};
use crate::registry::Registry;
use crate::rng::StreamRng;

/// Hidden-layer widths of every predictor network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetWidths {
    pub model: Vec<usize>,
    pub gmm_feature: Vec<usize>,
    pub gmm_head: Vec<usize>,
    pub flow_feature: Vec<usize>,
    pub flow_coupling: Vec<usize>,
}

impl Default for NetWidths {
    fn default() -> Self {
        Self {
            model: vec![256; 3],
            gmm_feature: vec![256; 2],
            gmm_head: vec![256; 2],
            flow_feature: vec![256; 3],
            flow_coupling: vec![256; 3],
        }
    }
}

impl NetWidths {
    /// Every layer at the same width `w`, keeping the default depths.
    pub fn uniform(w: usize) -> Self {
        let d = Self::default();
        Self {
            model: vec![w; d.model.len()],
            gmm_feature: vec![w; d.gmm_feature.len()],
            gmm_head: vec![w; d.gmm_head.len()],
            flow_feature: vec![w; d.flow_feature.len()],
            flow_coupling: vec![w; d.flow_coupling.len()],
        }
    }
}

/// Construction inputs shared by all continuous families.
#[derive(Clone, Debug)]
pub struct PredictorSpec {
    pub cond_dim: usize,
    pub range: PosteriorRange,
    pub n_mixture: usize,
    pub n_trans: usize,
    pub widths: NetWidths,
}

/// Conditional density `q(x | c)` over a continuous target.
pub trait DensityPredictor: ParamSet + Send + Sync {
    fn family(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn cond_dim(&self) -> usize;

    /// `ln q(x_i | c_i)` for every row.
    fn log_prob(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<f64>>;

    /// Log-probabilities plus the gradient of `sum_i coef_i ln q(x_i | c_i)`
    /// with respect to the parameters, laid out like [`DensityPredictor::nets`].
    fn log_prob_grad(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>, coef: &[f64]) -> Result<(Vec<f64>, Vec<NetGrad>)>;

    fn sample(&self, cond: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>>;

    fn nets(&self) -> &[DenseNet];

    /// Family-specific metadata for checkpoints.
    fn describe(&self) -> Value;

    fn clone_box(&self) -> Box<dyn DensityPredictor>;
}

impl Clone for Box<dyn DensityPredictor> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Constructors of one continuous family.
#[derive(Clone, Copy)]
pub struct Family {
    pub build: fn(&PredictorSpec, &mut StreamRng) -> Result<Box<dyn DensityPredictor>>,
    /// Rebuild from stored networks and [`DensityPredictor::describe`] metadata.
    pub restore: fn(Vec<DenseNet>, &Value) -> Result<Box<dyn DensityPredictor>>,
}

/// Built-in continuous posterior families.
pub fn registry() -> Registry<Family> {
    let mut r: Registry<Family> = Registry::new("posterior family");
    r.register(
        "gmm",
        Family {
            build: |s, rng| Ok(Box::new(GmmNet::new(s, rng)?)),
            restore: |n, m| Ok(Box::new(GmmNet::from_parts(n, m)?)),
        },
    )
    .register(
        "flow",
        Family {
            build: |s, rng| Ok(Box::new(FlowNet::new(s, rng)?)),
            restore: |n, m| Ok(Box::new(FlowNet::from_parts(n, m)?)),
        },
    );
    r
}

pub fn build(family: &str, spec: &PredictorSpec, rng: &mut StreamRng) -> Result<Box<dyn DensityPredictor>> {
    (registry().get(family)?.build)(spec, rng)
}

pub fn restore(family: &str, nets: Vec<DenseNet>, meta: &Value) -> Result<Box<dyn DensityPredictor>> {
    (registry().get(family)?.restore)(nets, meta)
}
