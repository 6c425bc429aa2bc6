//! Actor-critic training of design policies.
//!
//! Each iteration rolls out episodes with exploration noise, fits the
//! variational posteriors on a replay batch, recomputes that batch's
//! rewards, regresses the critic on blended bootstrap and Monte Carlo
//! targets, and takes one deterministic policy-gradient step.

mod buffer;
mod networks;

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use buffer::{Exploration, ReplayBuffer};
pub use networks::{
    chain_design_gradient, critic_loss_grad, policy_gradient, policy_registry, Actor, Critic, FixedPolicy, Policy,
    PolicyConstructor, UniformPolicy,
};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::history::{Episode, History};
use crate::nn::{soft_update, Adam, NetGrad, ParamSet};
use crate::posteriors::{BankConfig, PredictorBank};
use crate::rewards::{PriorTerms, RewardContext, RewardMode, RewardWeights, StageRewards};
use crate::rng::{streams, SeedTree, StreamRng};

/// Simulate `n` episodes, optionally perturbing every design.
///
/// Episode `e` of iteration `iteration` draws all of its randomness from
/// the stream `[ROLLOUT, iteration, e]`.
pub fn rollout(
    env: &dyn Environment,
    policy: &dyn Policy,
    exploration: Option<&Exploration>,
    seeds: &SeedTree,
    iteration: usize,
    n: usize,
) -> Result<Vec<Episode>> {
    (0..n)
        .map(|e| {
            let mut rng = seeds.rng(&[streams::ROLLOUT, iteration as u64, e as u64]);
            run_episode(env, policy, exploration, iteration, &mut rng)
        })
        .collect()
}

/// One episode from a freshly sampled truth.
pub fn run_episode(
    env: &dyn Environment,
    policy: &dyn Policy,
    exploration: Option<&Exploration>,
    iteration: usize,
    rng: &mut StreamRng,
) -> Result<Episode> {
    let spec = env.spec();
    let truth = env.sample_prior(rng);
    let mut history = History::new(spec.n_d, spec.n_y);
    let mut non_ig = Vec::with_capacity(spec.horizon);
    for k in 0..spec.horizon {
        let mut d = policy.design(&history, rng)?;
        if let Some(x) = exploration {
            x.perturb(&mut d, iteration, &spec.design_lower, &spec.design_upper, rng);
        }
        let y = env.observe(&truth, &d, &history, rng)?;
        non_ig.push(env.non_ig_reward(k, &history, &d, &y));
        history.push(&d, &y)?;
    }
    Ok(Episode { truth, history, non_ig })
}

/// Critic regression targets, one per `(episode, stage)` pair in row-major order.
///
/// `next_q[e][k]` is the target critic at stage `k + 1` for `k + 1 < N`.
/// The value after the last experiment is the terminal reward alone.
pub fn critic_targets(rewards: &[StageRewards], next_q: &[Vec<f64>], gamma: f64, psi: f64) -> Result<Vec<f64>> {
    if rewards.len() != next_q.len() {
        return Err(crate::error::dim_err(format!("{} reward rows for {} bootstrap rows", rewards.len(), next_q.len())));
    }
    let mut out = Vec::new();
    for (r, nq) in rewards.iter().zip(next_q) {
        let n = r.horizon();
        if nq.len() + 1 != n.max(1) {
            return Err(crate::error::dim_err(format!("{} bootstrap values for horizon {n}", nq.len())));
        }
        let mut ret = vec![0.0; n];
        let mut acc = r.terminal;
        for k in (0..n).rev() {
            acc = r.stage(k) + gamma * acc;
            ret[k] = acc;
        }
        for k in 0..n {
            let v = if k + 1 < n { nq[k] } else { r.terminal };
            let td = r.stage(k) + gamma * v;
            out.push(psi * td + (1.0 - psi) * ret[k]);
        }
    }
    Ok(out)
}

fn grad_norm(g: &NetGrad) -> f64 {
    g.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: RewardMode,
    pub weights: RewardWeights,
    pub priors: PriorTerms,
    pub n_update: usize,
    pub n_episode: usize,
    pub n_batch: usize,
    pub buffer_capacity: usize,
    /// Defaults to 1 for terminal and 0.9 for incremental rewards.
    pub gamma: Option<f64>,
    /// Defaults to 5e-4 for mixture posteriors with terminal rewards and 1e-3 otherwise.
    pub actor_lr: Option<f64>,
    pub actor_lr_decay: f64,
    pub critic_lr: f64,
    pub critic_lr_decay: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub noise_scale: f64,
    pub noise_decay: f64,
    pub target_rate: f64,
    pub predictor_steps: usize,
    pub critic_steps: usize,
    pub posteriors: BankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Tig,
            weights: RewardWeights::default(),
            priors: PriorTerms::default(),
            n_update: 10001,
            n_episode: 1000,
            n_batch: 10000,
            buffer_capacity: 1_000_000,
            gamma: None,
            actor_lr: None,
            actor_lr_decay: 0.9999,
            critic_lr: 1e-3,
            critic_lr_decay: 0.9999,
            actor_hidden: vec![256; 3],
            critic_hidden: vec![256; 3],
            noise_scale: 0.5,
            noise_decay: 0.9999,
            target_rate: 0.1,
            predictor_steps: 5,
            critic_steps: 5,
            posteriors: BankConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.mode {
            RewardMode::Tig => 1.0,
            RewardMode::Iig => 0.9,
        })
    }

    pub fn actor_lr(&self) -> f64 {
        self.actor_lr.unwrap_or(if self.mode == RewardMode::Tig && self.posteriors.theta_family == "gmm" {
            5e-4
        } else {
            1e-3
        })
    }

    /// Blend between bootstrap and Monte Carlo targets at `iteration`.
    pub fn psi(&self, iteration: usize) -> f64 {
        match self.mode {
            RewardMode::Iig => 1.0,
            RewardMode::Tig if self.n_update <= 1 => 0.0,
            RewardMode::Tig => (iteration as f64 / (self.n_update - 1) as f64).clamp(0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_episode == 0 || self.n_batch == 0 || self.buffer_capacity == 0 {
            return bad("n_episode, n_batch and buffer_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma()) {
            return bad(format!("gamma = {} outside [0, 1]", self.gamma()));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return bad(format!("target_rate = {} outside (0, 1]", self.target_rate));
        }
        if !(self.noise_scale >= 0.0) || !(self.noise_decay > 0.0) {
            return bad("noise_scale must be >= 0 and noise_decay > 0".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr()), ("critic_lr", self.critic_lr), ("posteriors.lr", self.posteriors.lr)] {
            if !(lr > 0.0) {
                return bad(format!("{name} = {lr} must be positive"));
            }
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn exploration(&self, n_d: usize) -> Exploration {
        Exploration { scale: vec![self.noise_scale; n_d], decay: self.noise_decay }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean total variational reward over the batch.
    pub utility: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: f64,
    pub noise_scale: f64,
    pub psi: f64,
    pub predictor_loss: f64,
}

/// Write records as CSV with a header row.
pub fn write_history_csv<W: Write>(records: &[IterationRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history_csv<R: std::io::Read>(r: R) -> Result<Vec<IterationRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}

/// Complete training state. Every update is a pure function of this state
/// and the seed tree, so a restored trainer continues exactly.
#[derive(Clone)]
pub struct Trainer {
    pub(crate) env: Arc<dyn Environment>,
    pub(crate) cfg: TrainConfig,
    pub(crate) seed: u64,
    pub(crate) seeds: SeedTree,
    pub(crate) actor: Actor,
    pub(crate) critic: Critic,
    pub(crate) critic_target: Critic,
    pub(crate) actor_opt: Adam,
    pub(crate) critic_opt: Adam,
    pub(crate) bank: PredictorBank,
    pub(crate) buffer: ReplayBuffer,
    pub(crate) iteration: usize,
    pub(crate) records: Vec<IterationRecord>,
}

impl Trainer {
    pub fn new(env: Arc<dyn Environment>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = env.spec().clone();
        if spec.horizon == 0 {
            return Err(Error::Config("training needs at least one experiment".into()));
        }
        cfg.weights.validate(&spec)?;
        let seeds = SeedTree::new(seed);
        let mut rng = seeds.rng(&[streams::INIT]);
        let actor = Actor::new(&spec, env.features(), &cfg.actor_hidden, &mut rng)?;
        let critic = Critic::new(actor.input_dim(), spec.n_d, &cfg.critic_hidden, &mut rng)?;
        let mut bank_rng = seeds.rng(&[streams::BANK]);
        let bank = PredictorBank::new(env.as_ref(), cfg.weights, cfg.mode, &cfg.posteriors, &mut bank_rng)?;
        Ok(Self {
            actor_opt: Adam::new(cfg.actor_lr(), cfg.actor_lr_decay),
            critic_opt: Adam::new(cfg.critic_lr, cfg.critic_lr_decay),
            critic_target: critic.clone(),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            env,
            cfg,
            seed,
            seeds,
            actor,
            critic,
            bank,
            iteration: 0,
            records: Vec::new(),
        })
    }

    pub fn env(&self) -> &Arc<dyn Environment> {
        &self.env
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn critic_target(&self) -> &Critic {
        &self.critic_target
    }

    pub fn bank(&self) -> &PredictorBank {
        &self.bank
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.n_update
    }

    /// Run the remaining iterations, calling `on_iteration` after each.
    pub fn train(&mut self, mut on_iteration: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
            on_iteration(self)?;
        }
        Ok(())
    }

    /// Actor and critic inputs of every `(episode, stage)` pair.
    fn stage_inputs(&self, batch: &[&Episode]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = self.env.spec().horizon;
        let rows: Vec<(&History, usize)> = batch.iter().flat_map(|e| (0..n).map(move |k| (&e.history, k))).collect();
        let x = self.actor.inputs(rows.iter().copied())?;
        let nd = self.env.spec().n_d;
        let d = Array2::from_shape_fn((rows.len(), nd), |(r, j)| rows[r].0.design(rows[r].1)[j]);
        Ok((x, self.actor.design_features(d.view())))
    }

    /// Target-critic values at stages `1 .. N-1` under the current actor.
    fn bootstrap(&self, x_next: ArrayView2<f64>, n_ep: usize) -> Result<Vec<Vec<f64>>> {
        let n = self.env.spec().horizon;
        if n <= 1 {
            return Ok(vec![Vec::new(); n_ep]);
        }
        let d = self.actor.act_batch(x_next)?;
        let input = Critic::input(x_next, self.actor.design_features(d.view()).view());
        let q = self.critic_target.q(input.view())?;
        Ok(q.chunks(n - 1).map(|c| c.to_vec()).collect())
    }

    fn check(&self, what: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("{what} is {v} at iteration {}", self.iteration)))
        }
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let it = self.iteration;
        let spec = self.env.spec().clone();
        let n = spec.horizon;
        let explore = self.cfg.exploration(spec.n_d);
        let fresh = rollout(self.env.as_ref(), &self.actor, Some(&explore), &self.seeds, it, self.cfg.n_episode)?;
        self.buffer.extend(fresh);

        let mut rng = self.seeds.rng(&[streams::BATCH, it as u64]);
        let batch: Vec<Episode> = self.buffer.sample(self.cfg.n_batch, &mut rng).into_iter().cloned().collect();
        let batch: Vec<&Episode> = batch.iter().collect();

        let mut predictor_loss = 0.0;
        for _ in 0..self.cfg.predictor_steps {
            predictor_loss = self.bank.update(&batch)?;
        }
        self.check("predictor loss", predictor_loss)?;

        let ctx = RewardContext::new(self.env.as_ref(), self.cfg.weights, self.cfg.priors)?;
        let rewards = ctx.rewards(&self.bank, self.cfg.mode, &batch)?;
        let utility = rewards.iter().map(StageRewards::total).sum::<f64>() / batch.len() as f64;
        self.check("batch utility", utility)?;

        let (x, d_feat) = self.stage_inputs(&batch)?;
        let critic_in = Critic::input(x.view(), d_feat.view());
        let next_rows: Vec<usize> = (0..batch.len()).flat_map(|e| (1..n).map(move |k| e * n + k)).collect();
        let x_next = x.select(ndarray::Axis(0), &next_rows);
        let gamma = self.cfg.gamma();
        let psi = self.cfg.psi(it);

        let mut critic_loss = 0.0;
        for _ in 0..self.cfg.critic_steps {
            let next_q = self.bootstrap(x_next.view(), batch.len())?;
            let targets = critic_targets(&rewards, &next_q, gamma, psi)?;
            let (loss, grad) = critic_loss_grad(&self.critic, critic_in.view(), &targets)?;
            critic_loss = self.check("critic loss", loss)?;
            self.critic_opt.step(&mut self.critic, &grad)?;
            soft_update(&mut self.critic_target, &self.critic, self.cfg.target_rate)?;
        }

        let (objective, grad) = policy_gradient(&self.actor, &self.critic, x.view(), batch.len())?;
        self.check("actor objective", objective)?;
        let actor_grad_norm = self.check("actor gradient norm", grad_norm(&grad))?;
        self.actor_opt.step(&mut self.actor, &grad)?;

        self.actor_opt.advance_epoch();
        self.critic_opt.advance_epoch();
        self.bank.advance_epoch();

        self.records.push(IterationRecord {
            iteration: it,
            utility,
            critic_loss,
            actor_grad_norm,
            noise_scale: explore.scale_at(it).first().copied().unwrap_or(0.0),
            psi,
            predictor_loss,
        });
        self.iteration += 1;
        Ok(self.records.last().expect("just pushed"))
    }
}
