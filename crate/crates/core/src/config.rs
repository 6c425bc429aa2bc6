//! Run configuration.
//!
//! A run is described by one TOML document:
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/source"
//! checkpoint_every = 100
//!
//! [env]
//! name = "source_location"
//! params = { source_counts = [1], horizon = 5 }
//!
//! [train]
//! n_update = 500
//! weights = { alpha_m = 0.0, alpha_theta = 1.0, alpha_z = 0.0 }
//!
//! [evaluation]
//! n_episodes = 2000
//! ```
//!
//! Every missing training key falls back to a per-environment preset, so
//! the resolved document written next to the results is complete.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::TrainConfig;
use crate::envs::{self, Environment};
use crate::error::{Error, Result};
use crate::posteriors::{NetWidths, PredictorBank};
use crate::rewards::RewardMode;
use crate::rng::{streams, SeedTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Contrastive samples for PCE.
    pub l: usize,
    /// Stages of the utility curve; empty means every stage.
    pub stages: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 2000, l: 10_000, stages: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Iterations between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

/// Training defaults for an environment and posterior family.
pub fn train_preset(env: &str, theta_family: &str) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.posteriors.theta_family = theta_family.into();
    match env {
        "ces" => {
            c.noise_scale = 5.0;
            c.noise_decay = 0.9998;
            c.actor_lr = Some(1e-3);
        }
        "sir" => {
            c.noise_scale = 5.0;
            c.actor_lr = Some(5e-4);
            if theta_family == "gmm" {
                c.posteriors.lr = 5e-4;
            } else {
                // The feature net drops its third layer at this size.
                c.posteriors.widths.flow_feature = vec![128; 2];
                c.posteriors.widths.flow_coupling = vec![128; 3];
            }
        }
        _ => {}
    }
    c
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_err)?;
        let env_name = doc
            .get("env")
            .and_then(|e| e.get("name"))
            .and_then(|n| n.as_str())
            .ok_or_else(|| Error::Config("missing `env.name`".into()))?
            .to_string();
        let user_train = match doc.remove("train") {
            Some(toml::Value::Table(t)) => t,
            None => toml::Table::new(),
            Some(_) => return Err(Error::Config("`train` must be a table".into())),
        };
        let family = user_train
            .get("posteriors")
            .and_then(|p| p.get("theta_family"))
            .and_then(|f| f.as_str())
            .unwrap_or("gmm");
        let mut train = toml::Table::try_from(train_preset(&env_name, family)).map_err(config_err)?;
        merge(&mut train, user_train);
        doc.insert("train".into(), toml::Value::Table(train));
        toml::Value::Table(doc).try_into().map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn build_env(&self) -> Result<Box<dyn Environment>> {
        envs::build(&self.env.name, &self.env.params)
    }

    /// Check every consistency rule, reporting all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        match self.build_env() {
            Err(e) => problems.push(format!("env: {e}")),
            Ok(env) => {
                if env.spec().horizon == 0 {
                    problems.push("env: horizon must be positive".into());
                }
                if let Err(e) = self.train.weights.validate(env.spec()) {
                    problems.push(format!("train.weights: {e}"));
                } else {
                    let mut rng = SeedTree::new(self.seed).rng(&[streams::MISC]);
                    let mut probe = self.train.posteriors.clone();
                    probe.widths = NetWidths::uniform(1);
                    if let Err(e) = PredictorBank::new(env.as_ref(), self.train.weights, self.train.mode, &probe, &mut rng) {
                        problems.push(format!("train.posteriors: {e}"));
                    }
                }
                if let Some(k) = self.evaluation.stages.iter().find(|k| **k > env.spec().horizon) {
                    problems.push(format!("evaluation.stages: stage {k} beyond the horizon"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Copy with every derived default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.gamma = Some(self.train.gamma());
        c.train.actor_lr = Some(self.train.actor_lr());
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn mode(&self) -> RewardMode {
        self.train.mode
    }
}
