//! Policy-quality estimators.
//!
//! Prior contrastive estimation (PCE) bounds the expected information gain
//! on the parameters from below using likelihood ratios against prior
//! samples; the variational bound averages one-point rewards computed from
//! trained posteriors. All estimators roll the policy out without
//! exploration noise and report per-episode values with a standard error.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{run_episode, Policy};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::history::Episode;
use crate::prob::log_sum_exp;
use crate::rewards::{PriorTerms, RewardContext, RewardWeights, StagePosterior};
use crate::rng::{streams, SeedTree};

/// Per-episode values with their mean and standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`.
    pub se: f64,
}

impl McEstimate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let se = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self { values, mean, se }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }
}

/// Serialized result of one estimator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: String,
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub mean: f64,
    pub se: f64,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EstimateRecord {
    pub fn new(estimator: &str, est: &McEstimate, l: usize, config_hash: String, seed: u64) -> Self {
        Self { estimator: estimator.into(), n: est.n(), l, mean: est.mean, se: est.se, config_hash, seed, note: None }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// How the contrastive denominator of PCE is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Contrast {
    /// `L` fresh prior samples per episode, shared by numerator and denominator.
    Sampled { l: usize },
    /// Every support point weighted by its prior mass (finite problems only).
    Enumerated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PceConfig {
    pub n_episodes: usize,
    pub contrast: Contrast,
}

impl Default for PceConfig {
    fn default() -> Self {
        Self { n_episodes: 2000, contrast: Contrast::Sampled { l: 10_000 } }
    }
}

impl PceConfig {
    /// Contrastive sample count reported with results (support size when enumerated).
    pub fn reported_l(&self, env: &dyn Environment) -> usize {
        match self.contrast {
            Contrast::Sampled { l } => l,
            Contrast::Enumerated => env
                .as_discrete()
                .map(|t| (0..t.n_models()).map(|m| t.n_theta(m) * t.n_eta(m)).sum())
                .unwrap_or(0),
        }
    }
}

/// Noise-free evaluation rollouts; episode `e` uses the stream `[EVAL, e]`.
pub fn evaluation_episodes(env: &dyn Environment, policy: &dyn Policy, n: usize, seeds: &SeedTree) -> Result<Vec<Episode>> {
    (0..n)
        .map(|e| run_episode(env, policy, None, 0, &mut seeds.rng(&[streams::EVAL, e as u64])))
        .collect()
}

/// `ln p(I_N | m, theta, eta)` summed over the stages of a history.
pub fn history_log_likelihood(env: &dyn Environment, ep: &Episode, model: usize, theta: &[f64], eta: &[f64]) -> Result<f64> {
    let h = &ep.history;
    let mut total = 0.0;
    for k in 0..h.len() {
        total += env
            .log_likelihood(model, theta, eta, h.design(k), h.observation(k), &h.prefix(k))
            .ok_or_else(|| Error::Unsupported(format!("{} has no explicit likelihood", env.name())))?;
    }
    Ok(total)
}

fn discrete(env: &dyn Environment) -> Result<&crate::envs::DiscreteToy> {
    env.as_discrete()
        .ok_or_else(|| Error::Unsupported(format!("enumerated contrast needs a finite problem, not {}", env.name())))
}

/// PCE of the parameter information gain under the true model.
pub fn pce_eig(env: &dyn Environment, policy: &dyn Policy, cfg: &PceConfig, seeds: &SeedTree) -> Result<McEstimate> {
    if env.spec().has_nuisance() {
        return Err(Error::Unsupported(format!(
            "{} has nuisance parameters; contrastive likelihoods would need another marginalization",
            env.name()
        )));
    }
    let episodes = evaluation_episodes(env, policy, cfg.n_episodes, seeds)?;
    let mut values = Vec::with_capacity(episodes.len());
    for (e, ep) in episodes.iter().enumerate() {
        let m = ep.truth.model;
        let own = history_log_likelihood(env, ep, m, &ep.truth.theta, &[])?;
        let value = match cfg.contrast {
            Contrast::Sampled { l } => {
                // Ratios to the true draw: the sum includes exp(0), so its log is
                // nonnegative and the estimate never exceeds ln(L + 1), even in rounding.
                let mut rng = seeds.rng(&[streams::CONTRAST, e as u64]);
                let mut terms = Vec::with_capacity(l + 1);
                terms.push(0.0);
                for _ in 0..l {
                    let (theta, _) = env.sample_parameters(m, &mut rng);
                    terms.push(history_log_likelihood(env, ep, m, &theta, &[])? - own);
                }
                ((l + 1) as f64).ln() - log_sum_exp(&terms)
            }
            Contrast::Enumerated => {
                let toy = discrete(env)?;
                let prior = &toy.tables().theta_prior[m];
                let mut terms = Vec::with_capacity(prior.len());
                for (t, p) in prior.iter().enumerate() {
                    if *p > 0.0 {
                        terms.push(p.ln() + history_log_likelihood(env, ep, m, &[t as f64], &[])?);
                    }
                }
                own - log_sum_exp(&terms)
            }
        };
        values.push(value);
    }
    Ok(McEstimate::from_values(values))
}

/// PCE of the model-index information gain.
///
/// Each model's evidence is averaged over `L / M` prior draws of its
/// parameters and nuisance values; the true draw joins its own model's average.
pub fn pce_model_eig(env: &dyn Environment, policy: &dyn Policy, cfg: &PceConfig, seeds: &SeedTree) -> Result<McEstimate> {
    let n_models = env.spec().n_models;
    let episodes = evaluation_episodes(env, policy, cfg.n_episodes, seeds)?;
    let mut values = Vec::with_capacity(episodes.len());
    for (e, ep) in episodes.iter().enumerate() {
        if n_models == 1 {
            values.push(0.0);
            continue;
        }
        let truth = &ep.truth;
        let mut evidence = Vec::with_capacity(n_models);
        match cfg.contrast {
            Contrast::Sampled { l } => {
                let per_model = (l / n_models).max(1);
                let mut rng = seeds.rng(&[streams::CONTRAST, e as u64]);
                for m in 0..n_models {
                    let mut terms = Vec::with_capacity(per_model + 1);
                    if m == truth.model {
                        terms.push(history_log_likelihood(env, ep, m, &truth.theta, &truth.eta)?);
                    }
                    for _ in 0..per_model {
                        let (theta, eta) = env.sample_parameters(m, &mut rng);
                        terms.push(history_log_likelihood(env, ep, m, &theta, &eta)?);
                    }
                    evidence.push(log_sum_exp(&terms) - (terms.len() as f64).ln());
                }
            }
            Contrast::Enumerated => {
                let toy = discrete(env)?;
                let tables = toy.tables();
                for m in 0..n_models {
                    let mut terms = Vec::new();
                    for (t, pt) in tables.theta_prior[m].iter().enumerate() {
                        for (h, pe) in tables.eta_prior[m].iter().enumerate() {
                            if *pt > 0.0 && *pe > 0.0 {
                                let eta: Vec<f64> = if env.spec().has_nuisance() { vec![h as f64] } else { Vec::new() };
                                terms.push(pt.ln() + pe.ln() + history_log_likelihood(env, ep, m, &[t as f64], &eta)?);
                            }
                        }
                    }
                    evidence.push(log_sum_exp(&terms));
                }
            }
        }
        let marginal: Vec<f64> = evidence.iter().enumerate().map(|(m, ev)| env.log_prior_model(m) + ev).collect();
        values.push(evidence[truth.model] - log_sum_exp(&marginal));
    }
    Ok(McEstimate::from_values(values))
}

/// Inputs shared by the variational estimators.
#[derive(Clone, Copy)]
pub struct VariationalSetup<'a> {
    pub env: &'a dyn Environment,
    pub policy: &'a dyn Policy,
    pub posterior: &'a dyn StagePosterior,
    pub weights: RewardWeights,
    pub priors: PriorTerms,
}

/// Utility truncated after `k` experiments: `L_k - L_0` plus non-IG rewards before `k`.
fn truncated_utility(ctx: &RewardContext, post: &dyn StagePosterior, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
    let non_ig = |ep: &Episode| ep.non_ig.iter().take(k).fold(0.0, |a, b| a + b);
    if k == 0 {
        return Ok(episodes.iter().map(|ep| non_ig(ep)).collect());
    }
    let l0 = ctx.stage_log_values(post, 0, episodes)?;
    let lk = ctx.stage_log_values(post, k, episodes)?;
    Ok(episodes.iter().zip(l0.iter().zip(&lk)).map(|(ep, (a, b))| b - a + non_ig(ep)).collect())
}

/// Monte Carlo variational lower bound over `n` noise-free rollouts.
pub fn variational_lower_bound(setup: &VariationalSetup, n: usize, seeds: &SeedTree) -> Result<McEstimate> {
    let horizon = setup.env.spec().horizon;
    Ok(evaluate_stagewise(setup, &[horizon], n, seeds)?.remove(0))
}

/// Variational utility truncated at each requested stage, on one shared set of rollouts.
pub fn evaluate_stagewise(setup: &VariationalSetup, stages: &[usize], n: usize, seeds: &SeedTree) -> Result<Vec<McEstimate>> {
    let horizon = setup.env.spec().horizon;
    if let Some(k) = stages.iter().find(|k| **k > horizon) {
        return Err(Error::InvalidParameter(format!("stage {k} beyond horizon {horizon}")));
    }
    let ctx = RewardContext::new(setup.env, setup.weights, setup.priors)?;
    let episodes = evaluation_episodes(setup.env, setup.policy, n, seeds)?;
    let refs: Vec<&Episode> = episodes.iter().collect();
    stages
        .iter()
        .map(|&k| Ok(McEstimate::from_values(truncated_utility(&ctx, setup.posterior, k, &refs)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{FixedPolicy, UniformPolicy};
    use crate::envs::{DiscreteToy, DiscreteToySpec, SourceLocation, Target, ToyGenerator};
    use crate::oracle::{exact_expected_utility, ExactPosterior, Formulation, PerturbedTables, TablePolicy, TablePosterior};
    use crate::rng::SeedTree;

    fn toy(seed: u64, n_models: usize, n_eta: usize) -> DiscreteToy {
        let g = ToyGenerator { n_models, max_theta: 3, max_y: 3, n_atoms: 2, n_eta, n_z: 0, horizon: 2 };
        g.generate(&mut SeedTree::new(seed).rng(&[0])).unwrap()
    }

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

    #[test]
    fn standard_error_of_known_values() {
        let e = McEstimate::from_values(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_contrastive_samples_give_zero() {
        let env = SourceLocation::new(vec![1], 3, 4.0).unwrap();
        let cfg = PceConfig { n_episodes: 20, contrast: Contrast::Sampled { l: 0 } };
        let est = pce_eig(&env, &UniformPolicy::new(env.spec()), &cfg, &SeedTree::new(1)).unwrap();
        assert!(est.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pce_is_capped_by_the_contrast_count() {
        let env = SourceLocation::new(vec![1], 4, 4.0).unwrap();
        for l in [1, 5, 50] {
            let cfg = PceConfig { n_episodes: 50, contrast: Contrast::Sampled { l } };
            let est = pce_eig(&env, &UniformPolicy::new(env.spec()), &cfg, &SeedTree::new(l as u64)).unwrap();
            let cap = ((l + 1) as f64).ln() + 1e-9;
            assert!(est.values.iter().all(|v| *v <= cap));
        }
    }

    #[test]
    fn nuisance_parameters_are_rejected() {
        let t = toy(3, 1, 2);
        let cfg = PceConfig { n_episodes: 5, contrast: Contrast::Enumerated };
        let policy = TablePolicy::constant(&t, 0.0);
        assert!(matches!(pce_eig(&t, &policy, &cfg, &SeedTree::new(0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn enumerated_pce_matches_the_exact_gain() {
        for seed in 0..3 {
            let t = toy(seed, 2, 1);
            let policy = TablePolicy::random(&t, &mut SeedTree::new(seed).rng(&[1]));
            let exact = exact_expected_utility(&t, &policy, Formulation::Tig, &RewardWeights::new(0.0, 1.0, 0.0).unwrap()).unwrap();
            let cfg = PceConfig { n_episodes: 4000, contrast: Contrast::Enumerated };
            let est = pce_eig(&t, &policy, &cfg, &SeedTree::new(seed + 10)).unwrap();
            assert!((est.mean - exact).abs() < 3.0 * est.se + 1e-12, "{} vs {exact} (se {})", est.mean, est.se);
        }
    }

    #[test]
    fn model_gain_of_a_single_model_is_zero() {
        let t = toy(4, 1, 1);
        let cfg = PceConfig { n_episodes: 10, contrast: Contrast::Sampled { l: 10 } };
        let est = pce_model_eig(&t, &TablePolicy::constant(&t, 0.0), &cfg, &SeedTree::new(0)).unwrap();
        assert!(est.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perfectly_discriminating_models_give_ln_m() {
        let spec = DiscreteToySpec {
            model_prior: vec![0.5, 0.5],
            theta_prior: vec![vec![1.0], vec![1.0]],
            eta_prior: vec![vec![1.0], vec![1.0]],
            likelihood: vec![vec![vec![vec![vec![1.0, 0.0]]]], vec![vec![vec![vec![0.0, 1.0]]]]],
            qoi: vec![vec![vec![0]], vec![vec![0]]],
            n_z: 0,
            horizon: 1,
        };
        let t = DiscreteToy::new(spec).unwrap();
        let cfg = PceConfig { n_episodes: 50, contrast: Contrast::Sampled { l: 20 } };
        let est = pce_model_eig(&t, &TablePolicy::constant(&t, 0.0), &cfg, &SeedTree::new(2)).unwrap();
        assert!((est.mean - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn model_gain_matches_enumeration() {
        for seed in 0..3 {
            let t = toy(20 + seed, 2, 2);
            let policy = TablePolicy::random(&t, &mut SeedTree::new(seed).rng(&[1]));
            let exact = exact_expected_utility(&t, &policy, Formulation::Tig, &RewardWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
            for contrast in [Contrast::Enumerated, Contrast::Sampled { l: 400 }] {
                let cfg = PceConfig { n_episodes: 3000, contrast };
                let est = pce_model_eig(&t, &policy, &cfg, &SeedTree::new(seed + 40)).unwrap();
                let slack = if contrast == Contrast::Enumerated { 0.0 } else { 0.02 };
                assert!((est.mean - exact).abs() < 3.0 * est.se + slack, "{contrast:?}: {} vs {exact}", est.mean);
            }
        }
    }

    #[test]
    fn prior_posteriors_give_a_zero_bound() {
        let t = toy(5, 2, 1);
        let policy = TablePolicy::constant(&t, 1.0);
        let prior = PriorOnly(&t);
        let setup = VariationalSetup {
            env: &t,
            policy: &policy,
            posterior: &prior,
            weights: RewardWeights::new(1.0, 1.0, 0.0).unwrap(),
            priors: PriorTerms::default(),
        };
        let est = variational_lower_bound(&setup, 100, &SeedTree::new(0)).unwrap();
        assert!(est.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn exact_posteriors_reproduce_the_exact_utility() {
        let t = toy(6, 2, 1);
        let policy = TablePolicy::random(&t, &mut SeedTree::new(6).rng(&[1]));
        let w = RewardWeights::new(1.0, 1.0, 0.0).unwrap();
        let exact = exact_expected_utility(&t, &policy, Formulation::Tig, &w).unwrap();
        let post = ExactPosterior::new(&t);
        let setup = VariationalSetup { env: &t, policy: &policy, posterior: &post, weights: w, priors: PriorTerms::default() };
        let est = variational_lower_bound(&setup, 5000, &SeedTree::new(7)).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.se, "{} vs {exact}", est.mean);
    }

    #[test]
    fn perturbed_posteriors_stay_below_the_exact_utility() {
        let t = toy(8, 2, 1);
        let policy = TablePolicy::random(&t, &mut SeedTree::new(8).rng(&[1]));
        let w = RewardWeights::new(1.0, 1.0, 0.0).unwrap();
        let exact = exact_expected_utility(&t, &policy, Formulation::Tig, &w).unwrap();
        for i in 0..50 {
            let post = TablePosterior::new(&t, PerturbedTables { seed: i, lambda: 0.3 });
            let setup = VariationalSetup { env: &t, policy: &policy, posterior: &post, weights: w, priors: PriorTerms::default() };
            let est = variational_lower_bound(&setup, 400, &SeedTree::new(100 + i)).unwrap();
            assert!(est.mean - 3.0 * est.se <= exact, "draw {i}: {} > {exact}", est.mean);
        }
    }

    #[test]
    fn stagewise_curve_properties() {
        let t = toy(9, 2, 1);
        let policy = TablePolicy::random(&t, &mut SeedTree::new(9).rng(&[1]));
        let post = ExactPosterior::new(&t);
        let setup = VariationalSetup {
            env: &t,
            policy: &policy,
            posterior: &post,
            weights: RewardWeights::new(1.0, 1.0, 0.0).unwrap(),
            priors: PriorTerms::default(),
        };
        let seeds = SeedTree::new(11);
        let curve = evaluate_stagewise(&setup, &[0, 1, 2], 3000, &seeds).unwrap();
        assert!(curve[0].values.iter().all(|v| *v == 0.0));
        let full = variational_lower_bound(&setup, 3000, &seeds).unwrap();
        assert!(curve[2].values.iter().zip(&full.values).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(curve[1].mean <= curve[2].mean + 3.0 * curve[2].se);
        assert!(curve[1].mean >= -3.0 * curve[1].se);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&PceConfig::default()).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&PceConfig::default()).unwrap());
        assert_ne!(a, config_hash(&PceConfig { n_episodes: 1, ..Default::default() }).unwrap());
        let env = SourceLocation::new(vec![1], 2, 4.0).unwrap();
        let fixed = FixedPolicy::new(env.spec(), vec![vec![0.0, 0.0]; 2]).unwrap();
        let est = pce_eig(&env, &fixed, &PceConfig { n_episodes: 3, contrast: Contrast::Sampled { l: 3 } }, &SeedTree::new(0)).unwrap();
        let rec = EstimateRecord::new("pce", &est, 3, a, 0);
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(json["L"], 3);
        assert_eq!(json["n"], 3);
    }
}
