//! Trainer checkpoints.
//!
//! A checkpoint is one [`TensorArchive`]: network weights, optimizer
//! moments, predictor bank and the full replay buffer as tensors, the rest
//! as JSON metadata. Randomness is addressed by seed and iteration, so no
//! generator state needs saving and a restored trainer continues exactly.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use crate::agent::{Actor, Critic, IterationRecord, ReplayBuffer, TrainConfig, Trainer};
use crate::envs::{Environment, GroundTruth};
use crate::error::{Error, Result};
use crate::evaluation::config_hash;
use crate::history::{Episode, History};
use crate::nn::{Adam, DenseNet, TensorArchive};
use crate::posteriors::PredictorBank;
use crate::rng::SeedTree;

const FORMAT: u64 = 1;

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    serde_json::from_value(meta[key].clone()).map_err(|e| Error::Format(format!("checkpoint field `{key}`: {e}")))
}

fn encode_buffer(buffer: &ReplayBuffer, archive: &mut TensorArchive) {
    let mut lengths = Vec::with_capacity(buffer.len() * 5);
    let mut data = Vec::new();
    for ep in buffer.iter() {
        let t = &ep.truth;
        let h = &ep.history;
        lengths.extend([t.theta.len(), t.eta.len(), t.z.len(), h.len(), ep.non_ig.len()].map(|v| v as f64));
        data.push(t.model as f64);
        data.push(t.sim_index.map_or(-1.0, |i| i as f64));
        data.extend(&t.theta);
        data.extend(&t.eta);
        data.extend(&t.z);
        for k in 0..h.len() {
            data.extend(h.design(k));
        }
        for k in 0..h.len() {
            data.extend(h.observation(k));
        }
        data.extend(&ep.non_ig);
    }
    archive.push("buffer/lengths", lengths);
    archive.push("buffer/data", data);
}

fn decode_buffer(archive: &TensorArchive, capacity: usize, n_d: usize, n_y: usize) -> Result<ReplayBuffer> {
    let lengths = archive.get("buffer/lengths")?;
    let data = archive.get("buffer/data")?;
    if lengths.len() % 5 != 0 {
        return Err(Error::Format("buffer lengths are not in groups of five".into()));
    }
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[f64]> {
        let s = data.get(pos..pos + n).ok_or_else(|| Error::Format("buffer data truncated".into()))?;
        pos += n;
        Ok(s)
    };
    let mut buffer = ReplayBuffer::new(capacity);
    for l in lengths.chunks(5) {
        let [n_theta, n_eta, n_z, len, n_non_ig] = [l[0], l[1], l[2], l[3], l[4]].map(|v| v as usize);
        let head = take(2)?;
        let (model, sim) = (head[0] as usize, head[1]);
        let truth = GroundTruth {
            model,
            sim_index: (sim >= 0.0).then_some(sim as usize),
            theta: take(n_theta)?.to_vec(),
            eta: take(n_eta)?.to_vec(),
            z: take(n_z)?.to_vec(),
        };
        let designs = take(len * n_d)?.to_vec();
        let obs = take(len * n_y)?.to_vec();
        let mut history = History::new(n_d, n_y);
        for k in 0..len {
            history.push(&designs[k * n_d..(k + 1) * n_d], &obs[k * n_y..(k + 1) * n_y])?;
        }
        buffer.push(Episode { truth, history, non_ig: take(n_non_ig)?.to_vec() });
    }
    if pos != data.len() {
        return Err(Error::Format("trailing buffer data".into()));
    }
    Ok(buffer)
}

/// Serialize a trainer. `extra` is stored verbatim under `meta.extra`.
pub fn to_archive(t: &Trainer, extra: Value) -> Result<TensorArchive> {
    let mut a = TensorArchive::default();
    let actor = t.actor.net().archive_into(&mut a, "actor");
    let critic = t.critic.net().archive_into(&mut a, "critic");
    let critic_target = t.critic_target.net().archive_into(&mut a, "critic_target");
    let actor_opt = t.actor_opt.archive_into(&mut a, "actor_opt");
    let critic_opt = t.critic_opt.archive_into(&mut a, "critic_opt");
    let bank = t.bank.archive_into(&mut a, "bank");
    encode_buffer(&t.buffer, &mut a);
    a.meta = json!({
        "format": FORMAT,
        "env": t.env.name(),
        "seed": t.seed,
        "iteration": t.iteration,
        "config": t.cfg,
        "config_hash": config_hash(&t.cfg)?,
        "records": t.records,
        "nets": { "actor": actor, "critic": critic, "critic_target": critic_target },
        "optimizers": { "actor": actor_opt, "critic": critic_opt },
        "bank": bank,
        "extra": extra,
    });
    Ok(a)
}

/// Rebuild a trainer around `env`, which must be the environment it was trained on.
pub fn from_archive(a: &TensorArchive, env: Arc<dyn Environment>) -> Result<Trainer> {
    let meta = &a.meta;
    let format: u64 = meta_field(meta, "format")?;
    if format != FORMAT {
        return Err(Error::Format(format!("checkpoint format {format}, expected {FORMAT}")));
    }
    let name: String = meta_field(meta, "env")?;
    if name != env.name() {
        return Err(Error::Config(format!("checkpoint was trained on {name}, not {}", env.name())));
    }
    let cfg: TrainConfig = meta_field(meta, "config")?;
    let hash: String = meta_field(meta, "config_hash")?;
    if hash != config_hash(&cfg)? {
        return Err(Error::Format("checkpoint config hash mismatch".into()));
    }
    let seed: u64 = meta_field(meta, "seed")?;
    let spec = env.spec().clone();
    let nets = &meta["nets"];
    let actor = Actor::from_net(DenseNet::from_archive(a, "actor", &nets["actor"])?, &spec, env.features())?;
    let critic = Critic::from_net(DenseNet::from_archive(a, "critic", &nets["critic"])?)?;
    let critic_target = Critic::from_net(DenseNet::from_archive(a, "critic_target", &nets["critic_target"])?)?;
    let opts = &meta["optimizers"];
    Ok(Trainer {
        actor_opt: Adam::from_archive(a, "actor_opt", &opts["actor"])?,
        critic_opt: Adam::from_archive(a, "critic_opt", &opts["critic"])?,
        bank: PredictorBank::from_archive(a, "bank", &meta["bank"])?,
        buffer: decode_buffer(a, cfg.buffer_capacity, spec.n_d, spec.n_y)?,
        iteration: meta_field(meta, "iteration")?,
        records: meta_field::<Vec<IterationRecord>>(meta, "records")?,
        seeds: SeedTree::new(seed),
        seed,
        cfg,
        env,
        actor,
        critic,
        critic_target,
    })
}

pub fn save(t: &Trainer, extra: Value, path: &Path) -> Result<()> {
    to_archive(t, extra)?.save(path)
}

/// Load a checkpoint file, returning the trainer and the stored `extra` value.
pub fn load(path: &Path, env: Arc<dyn Environment>) -> Result<(Trainer, Value)> {
    let a = TensorArchive::load(path)?;
    let extra = a.meta["extra"].clone();
    Ok((from_archive(&a, env)?, extra))
}

/// The `extra` value of a checkpoint without rebuilding the trainer.
pub fn read_extra(path: &Path) -> Result<Value> {
    Ok(TensorArchive::load(path)?.meta["extra"].clone())
}
