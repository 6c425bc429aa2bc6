//! One-point information-gain rewards.
//!
//! Every formulation is built from one quantity per stage,
//!
//! `L_k = sum_t alpha_t ln q_t(truth_t | I_k)`,
//!
//! where `t` ranges over the model index, the parameters and the predictive
//! quantity. At `k = 0` the posterior is the prior, and a prior term that is
//! switched off in [`PriorTerms`] contributes zero. The terminal formulation
//! pays `L_N - L_0` once; the incremental one pays `L_{k+1} - L_k` at every
//! stage.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Environment, Target};
use crate::error::{Error, Result};
use crate::history::Episode;

/// Per-target weights of the information gain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha_m: f64,
    pub alpha_theta: f64,
    pub alpha_z: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha_m: 0.0, alpha_theta: 1.0, alpha_z: 0.0 }
    }
}

impl RewardWeights {
    pub fn new(alpha_m: f64, alpha_theta: f64, alpha_z: f64) -> Result<Self> {
        let w = Self { alpha_m, alpha_theta, alpha_z };
        for (name, a) in [("alpha_m", alpha_m), ("alpha_theta", alpha_theta), ("alpha_z", alpha_z)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} = {a} outside [0, 1]")));
            }
        }
        Ok(w)
    }

    pub fn get(&self, target: Target) -> f64 {
        match target {
            Target::Model => self.alpha_m,
            Target::Theta => self.alpha_theta,
            Target::Z => self.alpha_z,
        }
    }

    /// Check the weights against a problem.
    ///
    /// Without nuisance parameters the predictive quantity is a function of
    /// the parameters, so weighting both fully counts the same information twice.
    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        Self::new(self.alpha_m, self.alpha_theta, self.alpha_z)?;
        if self.alpha_theta == 1.0 && self.alpha_z == 1.0 && !spec.has_nuisance() {
            return Err(Error::Config(
                "alpha_theta = alpha_z = 1 without nuisance parameters counts the predictive gain twice".into(),
            ));
        }
        if self.alpha_z > 0.0 && !spec.has_qoi() {
            return Err(Error::Config("alpha_z > 0 but the environment defines no predictive quantity".into()));
        }
        Ok(())
    }

    /// Targets that contribute to the reward on a problem.
    pub fn active_targets(&self, spec: &EnvSpec) -> Vec<Target> {
        let mut out = Vec::new();
        if self.alpha_m > 0.0 && spec.n_models > 1 {
            out.push(Target::Model);
        }
        if self.alpha_theta > 0.0 {
            out.push(Target::Theta);
        }
        if self.alpha_z > 0.0 && spec.has_qoi() {
            out.push(Target::Z);
        }
        out
    }
}

/// Which prior log-densities enter the stage-0 term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorTerms {
    pub model: bool,
    pub theta: bool,
    pub z: bool,
}

impl Default for PriorTerms {
    fn default() -> Self {
        Self { model: true, theta: true, z: false }
    }
}

impl PriorTerms {
    pub fn all() -> Self {
        Self { model: true, theta: true, z: true }
    }

    pub fn none() -> Self {
        Self { model: false, theta: false, z: false }
    }

    pub fn get(&self, target: Target) -> bool {
        match target {
            Target::Model => self.model,
            Target::Theta => self.theta,
            Target::Z => self.z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Terminal information gain.
    Tig,
    /// Incremental information gain.
    Iig,
}

/// Rewards of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRewards {
    /// Information-gain part of `g_0 .. g_{N-1}`.
    pub ig: Vec<f64>,
    /// `g_N`.
    pub terminal: f64,
    /// Non-IG part of `g_0 .. g_{N-1}`.
    pub non_ig: Vec<f64>,
}

impl StageRewards {
    /// Full immediate reward at stage `k`.
    pub fn stage(&self, k: usize) -> f64 {
        self.ig[k] + self.non_ig[k]
    }

    pub fn total(&self) -> f64 {
        self.ig.iter().sum::<f64>() + self.non_ig.iter().sum::<f64>() + self.terminal
    }

    pub fn horizon(&self) -> usize {
        self.ig.len()
    }
}

/// Log posterior of each episode's true target value after `k` experiments.
pub trait StagePosterior {
    /// `ln q(target | I_k)` for `k >= 1`, one value per episode.
    fn log_posterior(&self, target: Target, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>>;
}

/// Environment-side inputs to reward evaluation.
#[derive(Clone, Copy)]
pub struct RewardContext<'a> {
    pub env: &'a dyn Environment,
    pub weights: RewardWeights,
    pub priors: PriorTerms,
}

impl<'a> RewardContext<'a> {
    pub fn new(env: &'a dyn Environment, weights: RewardWeights, priors: PriorTerms) -> Result<Self> {
        weights.validate(env.spec())?;
        Ok(Self { env, weights, priors })
    }

    fn prior_log(&self, target: Target, ep: &Episode) -> Result<f64> {
        let t = &ep.truth;
        let v = match target {
            Target::Model => Some(self.env.log_prior_model(t.model)),
            Target::Theta => self.env.log_prior_theta(t.model, &t.theta),
            Target::Z => self.env.log_prior_z(t.model, &t.z),
        };
        v.ok_or_else(|| {
            Error::Unsupported(format!("{} has no closed-form {target:?} prior; drop that prior term", self.env.name()))
        })
    }

    /// `L_k` for every episode.
    pub fn stage_log_values(&self, post: &dyn StagePosterior, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; episodes.len()];
        for target in self.weights.active_targets(self.env.spec()) {
            let a = self.weights.get(target);
            if k == 0 {
                if !self.priors.get(target) {
                    continue;
                }
                for (o, ep) in out.iter_mut().zip(episodes) {
                    *o += a * self.prior_log(target, ep)?;
                }
            } else {
                let lq = post.log_posterior(target, k, episodes)?;
                for (o, l) in out.iter_mut().zip(lq) {
                    *o += a * l;
                }
            }
        }
        Ok(out)
    }

    /// Terminal reward `g_N = L_N - L_0`.
    pub fn tig_terminal(&self, post: &dyn StagePosterior, episodes: &[&Episode]) -> Result<Vec<f64>> {
        let n = self.env.spec().horizon;
        let l0 = self.stage_log_values(post, 0, episodes)?;
        if n == 0 {
            return Ok(vec![0.0; episodes.len()]);
        }
        let ln = self.stage_log_values(post, n, episodes)?;
        Ok(ln.iter().zip(&l0).map(|(a, b)| a - b).collect())
    }

    /// Incremental reward `g_k = L_{k+1} - L_k`.
    pub fn iig_stage(&self, post: &dyn StagePosterior, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
        let n = self.env.spec().horizon;
        if k >= n {
            return Err(Error::InvalidParameter(format!("stage {k} outside horizon {n}")));
        }
        let lo = self.stage_log_values(post, k, episodes)?;
        let hi = self.stage_log_values(post, k + 1, episodes)?;
        Ok(hi.iter().zip(&lo).map(|(a, b)| a - b).collect())
    }

    /// Rewards of every episode under `mode`.
    pub fn rewards(&self, post: &dyn StagePosterior, mode: RewardMode, episodes: &[&Episode]) -> Result<Vec<StageRewards>> {
        let n = self.env.spec().horizon;
        let mut out: Vec<StageRewards> = episodes
            .iter()
            .map(|ep| StageRewards { ig: vec![0.0; n], terminal: 0.0, non_ig: non_ig_of(ep, n) })
            .collect();
        match mode {
            RewardMode::Tig => {
                for (r, g) in out.iter_mut().zip(self.tig_terminal(post, episodes)?) {
                    r.terminal = g;
                }
            }
            RewardMode::Iig => {
                let mut prev = self.stage_log_values(post, 0, episodes)?;
                for k in 0..n {
                    let next = self.stage_log_values(post, k + 1, episodes)?;
                    for ((r, a), b) in out.iter_mut().zip(&next).zip(&prev) {
                        r.ig[k] = a - b;
                    }
                    prev = next;
                }
            }
        }
        Ok(out)
    }
}

fn non_ig_of(ep: &Episode, n: usize) -> Vec<f64> {
    let mut v = ep.non_ig.clone();
    v.resize(n, 0.0);
    v
}

/// Non-IG reward of every stage of a finished history.
pub fn non_ig_rewards(env: &dyn Environment, history: &crate::history::History) -> Vec<f64> {
    (0..history.len())
        .map(|k| env.non_ig_reward(k, &history.prefix(k), history.design(k), history.observation(k)))
        .collect()
}

/// One-point rewards computed from exact posteriors of a finite problem.
pub fn exact_one_point_rewards(
    env: &dyn Environment,
    weights: RewardWeights,
    priors: PriorTerms,
    mode: RewardMode,
    episodes: &[&Episode],
) -> Result<Vec<StageRewards>> {
    let toy = env
        .as_discrete()
        .ok_or_else(|| Error::Unsupported(format!("{} has no exact posterior", env.name())))?;
    let ctx = RewardContext::new(env, weights, priors)?;
    ctx.rewards(&crate::oracle::ExactPosterior::new(toy), mode, episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{DiscreteToy, DiscreteToySpec, GroundTruth, SourceLocation};
    use crate::history::History;
    use crate::rng::SeedTree;
    use rand::Rng;

    /// Posterior that returns a fixed value per (target, stage, episode).
    struct Table(Vec<Vec<f64>>);

    impl StagePosterior for Table {
        fn log_posterior(&self, target: Target, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
            let off = match target {
                Target::Model => 0.0,
                Target::Theta => 0.37,
                Target::Z => -1.3,
            };
            Ok((0..episodes.len()).map(|i| self.0[k][i] + off).collect())
        }
    }

    /// Posterior that always returns the prior.
    struct PriorOnly<'a>(&'a dyn Environment);

    impl StagePosterior for PriorOnly<'_> {
        fn log_posterior(&self, target: Target, _k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
            Ok(episodes
                .iter()
                .map(|ep| match target {
                    Target::Model => self.0.log_prior_model(ep.truth.model),
                    Target::Theta => self.0.log_prior_theta(ep.truth.model, &ep.truth.theta).unwrap(),
                    Target::Z => self.0.log_prior_z(ep.truth.model, &ep.truth.z).unwrap(),
                })
                .collect())
        }
    }

    fn source_episodes(n: usize, horizon: usize) -> (SourceLocation, Vec<Episode>) {
        let env = SourceLocation::new(vec![1, 2], horizon, 4.0).unwrap();
        let mut rng = SeedTree::new(11).rng(&[0]);
        let eps = (0..n)
            .map(|_| {
                let truth = env.sample_prior(&mut rng);
                let mut h = History::new(2, 1);
                for _ in 0..horizon {
                    let d = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
                    let y = env.observe(&truth, &d, &h, &mut rng).unwrap();
                    h.push(&d, &y).unwrap();
                }
                Episode { non_ig: vec![0.0; horizon], truth, history: h }
            })
            .collect();
        (env, eps)
    }

    #[test]
    fn weights_are_validated() {
        assert!(RewardWeights::new(1.2, 0.0, 0.0).is_err());
        assert!(RewardWeights::new(0.0, -0.1, 0.0).is_err());
        let env = SourceLocation::new(vec![2], 3, 4.0).unwrap();
        assert!(RewardWeights::new(0.0, 1.0, 1.0).unwrap().validate(env.spec()).is_err());
        assert!(RewardWeights::new(0.0, 1.0, 0.5).unwrap().validate(env.spec()).is_ok());
    }

    #[test]
    fn zero_weights_give_zero_rewards() {
        let (env, eps) = source_episodes(5, 3);
        let refs: Vec<&Episode> = eps.iter().collect();
        let ctx = RewardContext::new(&env, RewardWeights::new(0.0, 0.0, 0.0).unwrap(), PriorTerms::default()).unwrap();
        let post = Table(vec![vec![1.0; 5]; 4]);
        for r in ctx.rewards(&post, RewardMode::Tig, &refs).unwrap() {
            assert_eq!(r.total(), 0.0);
        }
    }

    #[test]
    fn prior_posterior_gives_zero_gain() {
        let (env, eps) = source_episodes(5, 3);
        let refs: Vec<&Episode> = eps.iter().collect();
        let ctx = RewardContext::new(&env, RewardWeights::new(1.0, 1.0, 0.0).unwrap(), PriorTerms::default()).unwrap();
        for mode in [RewardMode::Tig, RewardMode::Iig] {
            for r in ctx.rewards(&PriorOnly(&env), mode, &refs).unwrap() {
                assert!(r.total().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tig_has_no_stage_rewards_and_iig_no_terminal() {
        let (env, eps) = source_episodes(4, 3);
        let refs: Vec<&Episode> = eps.iter().collect();
        let ctx = RewardContext::new(&env, RewardWeights::new(1.0, 1.0, 0.0).unwrap(), PriorTerms::default()).unwrap();
        let post = Table(vec![vec![-0.5; 4], vec![0.1; 4], vec![0.9; 4], vec![2.0; 4]]);
        for r in ctx.rewards(&post, RewardMode::Tig, &refs).unwrap() {
            assert!(r.ig.iter().all(|g| *g == 0.0));
        }
        for r in ctx.rewards(&post, RewardMode::Iig, &refs).unwrap() {
            assert_eq!(r.terminal, 0.0);
        }
    }

    #[test]
    fn identical_consecutive_posteriors_give_zero_increment() {
        let (env, eps) = source_episodes(3, 3);
        let refs: Vec<&Episode> = eps.iter().collect();
        let ctx = RewardContext::new(&env, RewardWeights::new(1.0, 1.0, 0.0).unwrap(), PriorTerms::default()).unwrap();
        let post = Table(vec![vec![0.0; 3], vec![0.4; 3], vec![0.4; 3], vec![1.0; 3]]);
        let g = ctx.iig_stage(&post, 1, &refs).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropping_a_weight_removes_exactly_its_term() {
        let (env, eps) = source_episodes(6, 2);
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut rng = SeedTree::new(3).rng(&[0]);
        let post = Table((0..3).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect());
        let full = RewardContext::new(&env, RewardWeights::new(1.0, 0.7, 0.0).unwrap(), PriorTerms::default()).unwrap();
        let no_m = RewardContext::new(&env, RewardWeights::new(0.0, 0.7, 0.0).unwrap(), PriorTerms::default()).unwrap();
        let a = full.tig_terminal(&post, &refs).unwrap();
        let b = no_m.tig_terminal(&post, &refs).unwrap();
        for (i, ep) in eps.iter().enumerate() {
            let model_term = post.0[2][i] - env.log_prior_model(ep.truth.model);
            assert!((a[i] - b[i] - model_term).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_closed_form_prior_is_reported() {
        let env = SourceLocation::new(vec![2], 2, 4.0).unwrap();
        let ep = Episode {
            truth: GroundTruth { model: 0, theta: vec![0.0; 4], eta: vec![], z: vec![0.0], sim_index: None },
            history: History::new(2, 1),
            non_ig: vec![],
        };
        let ctx = RewardContext::new(&env, RewardWeights::new(0.0, 0.0, 1.0).unwrap(), PriorTerms::all()).unwrap();
        assert!(matches!(ctx.stage_log_values(&Table(vec![vec![0.0]]), 0, &[&ep]), Err(Error::Unsupported(_))));
        let ctx = RewardContext::new(&env, RewardWeights::new(0.0, 0.0, 1.0).unwrap(), PriorTerms::default()).unwrap();
        assert_eq!(ctx.stage_log_values(&Table(vec![vec![0.0]]), 0, &[&ep]).unwrap(), vec![0.0]);
    }

    fn discriminating_toy() -> DiscreteToy {
        DiscreteToy::new(DiscreteToySpec {
            model_prior: vec![0.5, 0.5],
            theta_prior: vec![vec![1.0], vec![1.0]],
            eta_prior: vec![vec![1.0], vec![1.0]],
            likelihood: vec![vec![vec![vec![vec![1.0, 0.0]]]], vec![vec![vec![vec![0.0, 1.0]]]]],
            qoi: vec![vec![vec![0]], vec![vec![0]]],
            n_z: 0,
            horizon: 1,
        })
        .unwrap()
    }

    #[test]
    fn perfectly_discriminating_observation_pays_ln_two() {
        let toy = discriminating_toy();
        let mut rng = SeedTree::new(5).rng(&[0]);
        let w = RewardWeights::new(1.0, 0.0, 0.0).unwrap();
        for _ in 0..10 {
            let truth = toy.sample_prior(&mut rng);
            let mut h = History::new(1, 1);
            let y = toy.observe(&truth, &[0.0], &h, &mut rng).unwrap();
            h.push(&[0.0], &y).unwrap();
            let ep = Episode { truth, history: h, non_ig: vec![0.0] };
            for mode in [RewardMode::Tig, RewardMode::Iig] {
                let r = exact_one_point_rewards(&toy, w, PriorTerms::default(), mode, &[&ep]).unwrap();
                assert!((r[0].total() - 2f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uninformative_toy_pays_nothing() {
        let toy = DiscreteToy::new(DiscreteToySpec {
            model_prior: vec![0.3, 0.7],
            theta_prior: vec![vec![0.4, 0.6], vec![1.0]],
            eta_prior: vec![vec![1.0], vec![1.0]],
            likelihood: vec![vec![vec![vec![vec![0.2, 0.8]]], vec![vec![vec![0.2, 0.8]]]], vec![vec![vec![vec![0.2, 0.8]]]]],
            qoi: vec![vec![vec![0], vec![1]], vec![vec![1]]],
            n_z: 2,
            horizon: 1,
        })
        .unwrap();
        let mut rng = SeedTree::new(6).rng(&[0]);
        let truth = toy.sample_prior(&mut rng);
        let mut h = History::new(1, 1);
        let y = toy.observe(&truth, &[0.0], &h, &mut rng).unwrap();
        h.push(&[0.0], &y).unwrap();
        let ep = Episode { truth, history: h, non_ig: vec![0.0] };
        let w = RewardWeights::new(1.0, 1.0, 0.0).unwrap();
        let r = exact_one_point_rewards(&toy, w, PriorTerms::all(), RewardMode::Iig, &[&ep]).unwrap();
        assert!(r[0].total().abs() < 1e-12);
    }

    #[test]
    fn exact_rewards_need_a_finite_problem() {
        let (env, eps) = source_episodes(1, 1);
        let w = RewardWeights::default();
        assert!(exact_one_point_rewards(&env, w, PriorTerms::default(), RewardMode::Tig, &[&eps[0]]).is_err());
    }

    #[test]
    fn movement_penalty_flows_into_rewards() {
        let mut env = SourceLocation::new(vec![2], 2, 4.0).unwrap();
        env.movement_penalty = 0.1;
        let mut h = History::new(2, 1);
        h.push(&[0.0, 0.0], &[1.0]).unwrap();
        h.push(&[3.0, 4.0], &[1.0]).unwrap();
        assert_eq!(non_ig_rewards(&env, &h), vec![0.0, -0.5]);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn incremental_rewards_telescope(seed in 0u64..1000, horizon in 1usize..5) {
            let (env, eps) = source_episodes(3, horizon);
            let refs: Vec<&Episode> = eps.iter().collect();
            let mut rng = SeedTree::new(seed).rng(&[1]);
            let post = Table((0..=horizon).map(|_| (0..3).map(|_| rng.random_range(-50.0..50.0)).collect()).collect());
            let ctx = RewardContext::new(&env, RewardWeights::new(1.0, 1.0, 0.0).unwrap(), PriorTerms::default()).unwrap();
            let tig = ctx.rewards(&post, RewardMode::Tig, &refs).unwrap();
            let iig = ctx.rewards(&post, RewardMode::Iig, &refs).unwrap();
            for (a, b) in tig.iter().zip(&iig) {
                prop_assert!((a.total() - b.total()).abs() < 1e-10);
            }
        }
    }
}
