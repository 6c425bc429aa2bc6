use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{build, restore, DensityPredictor, ModelPosteriorNet, NetWidths, PredictorSpec};
use crate::envs::{Environment, PosteriorRange, Target};
use crate::error::{Error, Result};
use crate::history::{write_encoding, Episode, FeatureMap, History};
use crate::nn::{Adam, DenseNet, ParamSet, TensorArchive};
use crate::rewards::{RewardMode, RewardWeights, StagePosterior};
use crate::rng::StreamRng;

/// Construction and optimizer settings of every predictor in a bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Family of the parameter posteriors (`gmm` or `flow`).
    pub theta_family: String,
    /// Family of the predictive-quantity posteriors.
    pub z_family: String,
    pub n_mixture: usize,
    pub n_trans: usize,
    pub widths: NetWidths,
    pub lr: f64,
    pub lr_decay: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            theta_family: "gmm".into(),
            z_family: "gmm".into(),
            n_mixture: 8,
            n_trans: 4,
            widths: NetWidths::default(),
            lr: 1e-3,
            lr_decay: 0.9999,
        }
    }
}

/// Address of one predictor: stage, target and model (0 for the model target).
pub type Slot = (usize, Target, usize);

#[derive(Clone)]
pub enum Predictor {
    Model(ModelPosteriorNet),
    Density(Box<dyn DensityPredictor>),
}

impl Predictor {
    pub fn nets(&self) -> Vec<&DenseNet> {
        match self {
            Predictor::Model(p) => vec![p.net()],
            Predictor::Density(p) => p.nets().iter().collect(),
        }
    }
}

struct Entry {
    predictor: Predictor,
    opt: Adam,
}

/// Every variational posterior a run needs, one per stage, target and model.
///
/// Terminal rewards need only the final stage; incremental rewards need
/// every stage from 1 to the horizon.
pub struct PredictorBank {
    entries: BTreeMap<Slot, Entry>,
    stages: Vec<usize>,
    fm: FeatureMap,
    n_d: usize,
    n_y: usize,
    weights: RewardWeights,
    cfg: BankConfig,
}

impl Clone for PredictorBank {
    fn clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (*k, Entry { predictor: e.predictor.clone(), opt: e.opt.clone() }))
                .collect(),
            stages: self.stages.clone(),
            fm: self.fm.clone(),
            n_d: self.n_d,
            n_y: self.n_y,
            weights: self.weights,
            cfg: self.cfg.clone(),
        }
    }
}

fn stages_for(mode: RewardMode, horizon: usize) -> Vec<usize> {
    match mode {
        RewardMode::Tig if horizon > 0 => vec![horizon],
        RewardMode::Tig => Vec::new(),
        RewardMode::Iig => (1..=horizon).collect(),
    }
}

impl PredictorBank {
    pub fn new(env: &dyn Environment, weights: RewardWeights, mode: RewardMode, cfg: &BankConfig, rng: &mut StreamRng) -> Result<Self> {
        let spec = env.spec();
        weights.validate(spec)?;
        let stages = stages_for(mode, spec.horizon);
        let step = spec.n_d + spec.n_y;
        let mut entries = BTreeMap::new();
        for &k in &stages {
            for target in weights.active_targets(spec) {
                if target == Target::Model {
                    let net = ModelPosteriorNet::new(k * step, spec.n_models, &cfg.widths.model, rng)?;
                    entries.insert((k, target, 0), Entry { predictor: Predictor::Model(net), opt: Adam::new(cfg.lr, cfg.lr_decay) });
                    continue;
                }
                let family = if target == Target::Theta { &cfg.theta_family } else { &cfg.z_family };
                for m in 0..spec.n_models {
                    let dim = if target == Target::Theta { spec.theta_dims[m] } else { spec.z_dims[m] };
                    let range = match env.posterior_range(target, m) {
                        Some(r) => r,
                        None if family != "gmm" => PosteriorRange::uniform(dim, (-1.0, 1.0), (0.1, 1.0)),
                        None => {
                            return Err(Error::Config(format!("{} gives no mixture range for {target:?}", env.name())));
                        }
                    };
                    if range.dim() != dim {
                        return Err(Error::Config(format!("{target:?} range of dimension {} for a {dim}-dimensional target", range.dim())));
                    }
                    let ps = PredictorSpec { cond_dim: k * step, range, n_mixture: cfg.n_mixture, n_trans: cfg.n_trans, widths: cfg.widths.clone() };
                    let p = build(family, &ps, rng).map_err(|e| Error::Config(format!("{target:?} posterior of model {m}: {e}")))?;
                    entries.insert((k, target, m), Entry { predictor: Predictor::Density(p), opt: Adam::new(cfg.lr, cfg.lr_decay) });
                }
            }
        }
        Ok(Self { entries, stages, fm: env.features(), n_d: spec.n_d, n_y: spec.n_y, weights, cfg: cfg.clone() })
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, slot: Slot) -> Option<&Predictor> {
        self.entries.get(&slot).map(|e| &e.predictor)
    }

    pub fn config(&self) -> &BankConfig {
        &self.cfg
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.fm
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.predictor.nets().iter().map(|n| n.num_params()).sum::<usize>()).sum()
    }

    fn conditioning(&self, k: usize, histories: &[&History]) -> Result<Array2<f64>> {
        let w = k * (self.n_d + self.n_y);
        let mut c = Array2::zeros((histories.len(), w));
        for (mut row, h) in c.rows_mut().into_iter().zip(histories) {
            write_encoding(h, k, &self.fm, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(c)
    }

    /// Rows of `cond` and target values for the episodes generated by model `m`.
    fn select(cond: &Array2<f64>, episodes: &[&Episode], m: usize, target: Target) -> (Vec<usize>, Array2<f64>, Array2<f64>) {
        let idx: Vec<usize> = (0..episodes.len()).filter(|&i| episodes[i].truth.model == m).collect();
        let vals = |i: usize| -> &[f64] {
            let t = &episodes[i].truth;
            if target == Target::Theta { &t.theta } else { &t.z }
        };
        let width = idx.first().map(|&i| vals(i).len()).unwrap_or(0);
        let c = Array2::from_shape_fn((idx.len(), cond.ncols()), |(r, j)| cond[[idx[r], j]]);
        let x = Array2::from_shape_fn((idx.len(), width), |(r, j)| vals(idx[r])[j]);
        (idx, c, x)
    }

    /// One maximum-likelihood step for every predictor on a batch.
    ///
    /// Returns the batch mean of `-sum_t alpha_t ln q_t` summed over stages.
    pub fn update(&mut self, episodes: &[&Episode]) -> Result<f64> {
        if episodes.is_empty() {
            return Ok(0.0);
        }
        let n = episodes.len() as f64;
        let histories: Vec<&History> = episodes.iter().map(|e| &e.history).collect();
        let mut loss = 0.0;
        for k in self.stages.clone() {
            let cond = self.conditioning(k, &histories)?;
            let slots: Vec<Slot> = self.entries.keys().filter(|s| s.0 == k).copied().collect();
            for slot in slots {
                let alpha = self.weights.get(slot.1);
                let entry = self.entries.get_mut(&slot).expect("slot exists");
                match &mut entry.predictor {
                    Predictor::Model(p) => {
                        let models: Vec<usize> = episodes.iter().map(|e| e.truth.model).collect();
                        let coef = vec![-1.0 / n; episodes.len()];
                        let (vals, g) = p.log_prob_grad(cond.view(), &models, &coef)?;
                        loss -= alpha * vals.iter().sum::<f64>() / n;
                        entry.opt.step(p, &g)?;
                    }
                    Predictor::Density(p) => {
                        let (idx, c, x) = Self::select(&cond, episodes, slot.2, slot.1);
                        if idx.is_empty() {
                            continue;
                        }
                        let coef = vec![-1.0 / idx.len() as f64; idx.len()];
                        let (vals, grads) = p.log_prob_grad(c.view(), x.view(), &coef)?;
                        loss -= alpha * vals.iter().sum::<f64>() / n;
                        entry.opt.step(p.as_mut(), &grads)?;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("predictor loss {loss}")));
        }
        Ok(loss)
    }

    /// Decay every learning rate by one epoch.
    pub fn advance_epoch(&mut self) {
        for e in self.entries.values_mut() {
            e.opt.advance_epoch();
        }
    }

    /// Draws from the posterior of `target` under model `m` after the first `k` stages of `history`.
    pub fn sample(&self, target: Target, k: usize, m: usize, history: &History, n: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let cond = self.conditioning(k, &[history])?;
        let c = cond.row(0).to_vec();
        match self.get((k, target, if target == Target::Model { 0 } else { m })) {
            Some(Predictor::Model(p)) => Ok(p.sample(&c, n, rng)?.into_iter().map(|v| vec![v as f64]).collect()),
            Some(Predictor::Density(p)) => p.sample(&c, n, rng),
            None => Err(Error::MissingPredictor(format!("stage {k} {target:?} model {m}"))),
        }
    }

    /// Store every network and optimizer; the layout goes in the returned value.
    pub fn archive_into(&self, archive: &mut TensorArchive, prefix: &str) -> Value {
        let mut slots = Vec::new();
        for (i, ((k, target, m), e)) in self.entries.iter().enumerate() {
            let name = format!("{prefix}/{i}");
            let nets: Vec<Value> = e.predictor.nets().iter().enumerate().map(|(j, n)| n.archive_into(archive, &format!("{name}/net{j}"))).collect();
            let describe = match &e.predictor {
                Predictor::Model(p) => p.describe(),
                Predictor::Density(p) => p.describe(),
            };
            let opt = e.opt.archive_into(archive, &format!("{name}/opt"));
            slots.push(json!({ "stage": k, "target": target, "model": m, "describe": describe, "nets": nets, "opt": opt }));
        }
        json!({ "slots": slots, "stages": self.stages, "features": self.fm, "n_d": self.n_d, "n_y": self.n_y, "weights": self.weights, "config": self.cfg })
    }

    pub fn from_archive(archive: &TensorArchive, prefix: &str, meta: &Value) -> Result<Self> {
        let slots = meta["slots"].as_array().ok_or_else(|| Error::Format("bank metadata lacks slots".into()))?;
        let mut entries = BTreeMap::new();
        for (i, s) in slots.iter().enumerate() {
            let name = format!("{prefix}/{i}");
            let shapes = s["nets"].as_array().ok_or_else(|| Error::Format("slot lacks nets".into()))?;
            let nets = shapes
                .iter()
                .enumerate()
                .map(|(j, sh)| DenseNet::from_archive(archive, &format!("{name}/net{j}"), sh))
                .collect::<Result<Vec<_>>>()?;
            let describe = &s["describe"];
            let family = describe["family"].as_str().ok_or_else(|| Error::Format("slot lacks a family".into()))?;
            let predictor = if family == "model" {
                Predictor::Model(ModelPosteriorNet::from_net(nets.into_iter().next().ok_or_else(|| Error::Format("empty model slot".into()))?)?)
            } else {
                Predictor::Density(restore(family, nets, describe)?)
            };
            let opt = Adam::from_archive(archive, &format!("{name}/opt"), &s["opt"])?;
            let slot: Slot = (
                serde_json::from_value(s["stage"].clone())?,
                serde_json::from_value(s["target"].clone())?,
                serde_json::from_value(s["model"].clone())?,
            );
            entries.insert(slot, Entry { predictor, opt });
        }
        Ok(Self {
            entries,
            stages: serde_json::from_value(meta["stages"].clone())?,
            fm: serde_json::from_value(meta["features"].clone())?,
            n_d: serde_json::from_value(meta["n_d"].clone())?,
            n_y: serde_json::from_value(meta["n_y"].clone())?,
            weights: serde_json::from_value(meta["weights"].clone())?,
            cfg: serde_json::from_value(meta["config"].clone())?,
        })
    }
}

impl StagePosterior for PredictorBank {
    fn log_posterior(&self, target: Target, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
        let histories: Vec<&History> = episodes.iter().map(|e| &e.history).collect();
        let cond = self.conditioning(k, &histories)?;
        let missing = || Error::MissingPredictor(format!("no stage-{k} {target:?} posterior"));
        if target == Target::Model {
            return match self.get((k, target, 0)) {
                Some(Predictor::Model(p)) => {
                    let models: Vec<usize> = episodes.iter().map(|e| e.truth.model).collect();
                    p.log_prob(cond.view(), &models)
                }
                _ => Err(missing()),
            };
        }
        let mut out = vec![0.0; episodes.len()];
        let n_models = episodes.iter().map(|e| e.truth.model + 1).max().unwrap_or(0);
        for m in 0..n_models {
            let (idx, c, x) = Self::select(&cond, episodes, m, target);
            if idx.is_empty() {
                continue;
            }
            let Some(Predictor::Density(p)) = self.get((k, target, m)) else {
                return Err(missing());
            };
            for (i, v) in idx.into_iter().zip(p.log_prob(c.view(), x.view())?) {
                out[i] = v;
            }
        }
        Ok(out)
    }
}
