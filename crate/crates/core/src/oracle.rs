//! Exact enumeration on finite problems.
//!
//! A [`DiscreteToy`] has finitely many models, parameters, nuisance values
//! and outcomes, so every expected utility is a finite sum over truths and
//! observation sequences. Deterministic policies are represented as tables
//! from observed outcome prefixes to designs.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{DiscreteToy, Target, ToyGenerator};
use crate::error::{Error, Result};
use crate::history::{Episode, History};
use crate::rewards::{RewardWeights, StagePosterior};
use crate::rng::{streams, SeedTree};

/// Posterior of a finite problem after some history.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPosterior {
    /// `[m][theta][eta]`, summing to one.
    pub joint: Vec<Vec<Vec<f64>>>,
    pub model: Vec<f64>,
    /// `p(theta | m, I)`.
    pub theta: Vec<Vec<f64>>,
    /// `p(z | m, I)`, empty rows when the problem has no predictive quantity.
    pub z: Vec<Vec<f64>>,
}

impl ToyPosterior {
    fn from_joint(toy: &DiscreteToy, mut joint: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let total: f64 = joint.iter().flatten().flatten().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroProbability);
        }
        joint.iter_mut().flatten().flatten().for_each(|v| *v /= total);
        let model: Vec<f64> = joint.iter().map(|t| t.iter().flatten().sum()).collect();
        let mut theta = Vec::with_capacity(joint.len());
        let mut z = Vec::with_capacity(joint.len());
        for (m, tm) in joint.iter().enumerate() {
            let pm = model[m];
            let row: Vec<f64> = tm.iter().map(|e| if pm > 0.0 { e.iter().sum::<f64>() / pm } else { 0.0 }).collect();
            theta.push(row);
            let mut zr = vec![0.0; toy.n_z()];
            if toy.n_z() > 0 && pm > 0.0 {
                for (t, er) in tm.iter().enumerate() {
                    for (e, v) in er.iter().enumerate() {
                        zr[toy.qoi_atom(m, t, e)] += v / pm;
                    }
                }
            }
            z.push(zr);
        }
        Ok(Self { joint, model, theta, z })
    }

    pub fn target(&self, target: Target, m: usize) -> &[f64] {
        match target {
            Target::Model => &self.model,
            Target::Theta => &self.theta[m],
            Target::Z => &self.z[m],
        }
    }
}

fn prior_joint(toy: &DiscreteToy) -> Vec<Vec<Vec<f64>>> {
    let t = toy.tables();
    (0..toy.n_models())
        .map(|m| {
            (0..toy.n_theta(m))
                .map(|th| (0..toy.n_eta(m)).map(|e| t.model_prior[m] * t.theta_prior[m][th] * t.eta_prior[m][e]).collect())
                .collect()
        })
        .collect()
}

fn outcome(y: f64, toy: &DiscreteToy) -> Result<usize> {
    let i = y as usize;
    if y < 0.0 || y.fract() != 0.0 || i >= toy.n_y() {
        return Err(Error::InvalidParameter(format!("observation {y} is not an outcome index")));
    }
    Ok(i)
}

/// Posterior by sequential Bayes updates, renormalizing after every stage.
pub fn exact_posterior(toy: &DiscreteToy, history: &History) -> Result<ToyPosterior> {
    let mut joint = prior_joint(toy);
    for k in 0..history.len() {
        let d = history.design(k)[0];
        let y = outcome(history.observation(k)[0], toy)?;
        let mut total = 0.0;
        for (m, tm) in joint.iter_mut().enumerate() {
            for (t, er) in tm.iter_mut().enumerate() {
                for (e, v) in er.iter_mut().enumerate() {
                    *v *= toy.lik(m, t, e, d, y);
                    total += *v;
                }
            }
        }
        if !(total > 0.0) {
            return Err(Error::ZeroProbability);
        }
        joint.iter_mut().flatten().flatten().for_each(|v| *v /= total);
    }
    ToyPosterior::from_joint(toy, joint)
}

/// Posterior from the unnormalized joint table of prior times the full likelihood product.
pub fn direct_posterior(toy: &DiscreteToy, history: &History) -> Result<ToyPosterior> {
    let t = toy.tables();
    let ys: Vec<usize> = (0..history.len()).map(|k| outcome(history.observation(k)[0], toy)).collect::<Result<_>>()?;
    let joint = (0..toy.n_models())
        .map(|m| {
            (0..toy.n_theta(m))
                .map(|th| {
                    (0..toy.n_eta(m))
                        .map(|e| {
                            let lik: f64 = (0..history.len()).map(|k| toy.lik(m, th, e, history.design(k)[0], ys[k])).product();
                            t.model_prior[m] * t.theta_prior[m][th] * t.eta_prior[m][e] * lik
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    ToyPosterior::from_joint(toy, joint)
}

/// Exact posteriors as a reward source.
pub struct ExactPosterior<'a> {
    toy: &'a DiscreteToy,
}

impl<'a> ExactPosterior<'a> {
    pub fn new(toy: &'a DiscreteToy) -> Self {
        Self { toy }
    }
}

impl StagePosterior for ExactPosterior<'_> {
    fn log_posterior(&self, target: Target, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
        episodes
            .iter()
            .map(|ep| {
                let post = exact_posterior(self.toy, &ep.history.prefix(k))?;
                let (m, t, e) = self.toy.indices(&ep.truth);
                Ok(match target {
                    Target::Model => post.model[m].ln(),
                    Target::Theta => post.theta[m][t].ln(),
                    Target::Z => post.z[m][self.toy.qoi_atom(m, t, e)].ln(),
                })
            })
            .collect()
    }
}

/// Variational tables as a reward source for sampled episodes.
pub struct TablePosterior<'a, T: VariationalTables> {
    toy: &'a DiscreteToy,
    tables: T,
}

impl<'a, T: VariationalTables> TablePosterior<'a, T> {
    pub fn new(toy: &'a DiscreteToy, tables: T) -> Self {
        Self { toy, tables }
    }
}

impl<T: VariationalTables> StagePosterior for TablePosterior<'_, T> {
    fn log_posterior(&self, target: Target, k: usize, episodes: &[&Episode]) -> Result<Vec<f64>> {
        episodes
            .iter()
            .map(|ep| {
                let prefix = ep.history.prefix(k);
                let post = exact_posterior(self.toy, &prefix)?;
                let key: Vec<usize> = (0..k).map(|i| prefix.observation(i)[0] as usize).collect();
                let (m, t, e) = self.toy.indices(&ep.truth);
                let idx = match target {
                    Target::Model => m,
                    Target::Theta => t,
                    Target::Z => self.toy.qoi_atom(m, t, e),
                };
                Ok(self.tables.table(target, &key, &post, m)[idx].ln())
            })
            .collect()
    }
}

/// Deterministic policy keyed by the outcomes observed so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TablePolicy {
    table: BTreeMap<Vec<usize>, f64>,
}

fn prefixes(n_y: usize, horizon: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..horizon {
        let mut next = Vec::new();
        for p in &frontier {
            for y in 0..n_y {
                let mut q: Vec<usize> = p.clone();
                q.push(y);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl TablePolicy {
    /// Every prefix gets a design atom drawn uniformly.
    pub fn random<R: Rng + ?Sized>(toy: &DiscreteToy, rng: &mut R) -> Self {
        let atoms = toy.atom_designs();
        let table = prefixes(toy.n_y(), toy.spec_horizon())
            .into_iter()
            .map(|p| (p, atoms[rng.random_range(0..atoms.len())]))
            .collect();
        Self { table }
    }

    pub fn constant(toy: &DiscreteToy, d: f64) -> Self {
        Self { table: prefixes(toy.n_y(), toy.spec_horizon()).into_iter().map(|p| (p, d)).collect() }
    }

    /// Tabulate any policy at every attainable history.
    pub fn tabulate(toy: &DiscreteToy, mut policy: impl FnMut(&History) -> Result<f64>) -> Result<Self> {
        let mut table = BTreeMap::new();
        let mut stack: Vec<(Vec<usize>, History)> = vec![(Vec::new(), History::new(1, 1))];
        let n = toy.spec_horizon();
        while let Some((key, h)) = stack.pop() {
            if key.len() >= n {
                continue;
            }
            let d = policy(&h)?;
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::InvalidParameter(format!("tabulated design {d} outside [0, 1]")));
            }
            table.insert(key.clone(), d);
            for y in 0..toy.n_y() {
                let mut k2 = key.clone();
                k2.push(y);
                let mut h2 = h.clone();
                h2.push(&[d], &[y as f64])?;
                stack.push((k2, h2));
            }
        }
        Ok(Self { table })
    }

    pub fn design(&self, prefix: &[usize]) -> Result<f64> {
        self.table
            .get(prefix)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("policy table has no entry for {prefix:?}")))
    }

    /// The same table with the design at one prefix moved to a different atom.
    pub fn perturbed<R: Rng + ?Sized>(&self, toy: &DiscreteToy, rng: &mut R) -> Self {
        let mut out = self.clone();
        let atoms = toy.atom_designs();
        if atoms.len() < 2 {
            return out;
        }
        let keys: Vec<Vec<usize>> = out.table.keys().cloned().collect();
        let k = &keys[rng.random_range(0..keys.len())];
        let cur = out.table[k];
        let choices: Vec<f64> = atoms.into_iter().filter(|a| *a != cur).collect();
        out.table.insert(k.clone(), choices[rng.random_range(0..choices.len())]);
        out
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl crate::agent::Policy for TablePolicy {
    fn name(&self) -> &str {
        "table"
    }

    fn design(&self, history: &History, _rng: &mut crate::rng::StreamRng) -> Result<Vec<f64>> {
        let key: Vec<usize> = (0..history.len()).map(|i| history.observation(i)[0] as usize).collect();
        Ok(vec![self.design(&key)?])
    }
}

impl DiscreteToy {
    fn spec_horizon(&self) -> usize {
        crate::envs::Environment::spec(self).horizon
    }
}

/// The four exact reward formulations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Tig,
    Iig,
    OnePointTig,
    OnePointIig,
}

/// One node of the outcome tree: the history so far and the joint mass of
/// every truth with it.
struct Node<'a> {
    key: &'a [usize],
    history: &'a History,
    /// `P(m, theta, eta, I_k)`.
    mass: &'a [Vec<Vec<f64>>],
    posterior: &'a ToyPosterior,
    parent: Option<&'a ToyPosterior>,
}

fn walk(toy: &DiscreteToy, policy: &TablePolicy, visit: &mut dyn FnMut(&Node) -> Result<()>) -> Result<()> {
    fn rec(
        toy: &DiscreteToy,
        policy: &TablePolicy,
        key: &mut Vec<usize>,
        history: &History,
        mass: Vec<Vec<Vec<f64>>>,
        parent: Option<&ToyPosterior>,
        visit: &mut dyn FnMut(&Node) -> Result<()>,
    ) -> Result<()> {
        let posterior = ToyPosterior::from_joint(toy, mass.clone())?;
        visit(&Node { key, history, mass: &mass, posterior: &posterior, parent })?;
        if key.len() == toy.spec_horizon() {
            return Ok(());
        }
        let d = policy.design(key)?;
        for y in 0..toy.n_y() {
            let next: Vec<Vec<Vec<f64>>> = mass
                .iter()
                .enumerate()
                .map(|(m, tm)| {
                    tm.iter()
                        .enumerate()
                        .map(|(t, er)| er.iter().enumerate().map(|(e, v)| v * toy.lik(m, t, e, d, y)).collect())
                        .collect()
                })
                .collect();
            if next.iter().flatten().flatten().sum::<f64>() <= 0.0 {
                continue;
            }
            let mut h = history.clone();
            h.push(&[d], &[y as f64])?;
            key.push(y);
            rec(toy, policy, key, &h, next, Some(&posterior), visit)?;
            key.pop();
        }
        Ok(())
    }
    rec(toy, policy, &mut Vec::new(), &History::new(1, 1), prior_joint(toy), None, visit)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn mass_of(node: &Node) -> f64 {
    node.mass.iter().flatten().flatten().sum()
}

/// Weighted KL gain from `before` to `after`.
fn kl_gain(toy: &DiscreteToy, w: &RewardWeights, after: &ToyPosterior, before: &ToyPosterior) -> f64 {
    let mut g = w.alpha_m * kl(&after.model, &before.model);
    for m in 0..toy.n_models() {
        if after.model[m] == 0.0 {
            continue;
        }
        let mut inner = w.alpha_theta * kl(&after.theta[m], &before.theta[m]);
        if toy.n_z() > 0 {
            inner += w.alpha_z * kl(&after.z[m], &before.z[m]);
        }
        g += after.model[m] * inner;
    }
    g
}

/// Weighted one-point log-ratio for a truth.
fn one_point(toy: &DiscreteToy, w: &RewardWeights, m: usize, t: usize, e: usize, after: &ToyPosterior, before: &ToyPosterior) -> f64 {
    let mut g = w.alpha_m * (after.model[m] / before.model[m]).ln() + w.alpha_theta * (after.theta[m][t] / before.theta[m][t]).ln();
    if toy.n_z() > 0 {
        let z = toy.qoi_atom(m, t, e);
        g += w.alpha_z * (after.z[m][z] / before.z[m][z]).ln();
    }
    g
}

fn for_truths(node: &Node, mut f: impl FnMut(usize, usize, usize, f64)) {
    for (m, tm) in node.mass.iter().enumerate() {
        for (t, er) in tm.iter().enumerate() {
            for (e, v) in er.iter().enumerate() {
                if *v > 0.0 {
                    f(m, t, e, *v);
                }
            }
        }
    }
}

/// Exact expected utility of a tabulated policy.
pub fn exact_expected_utility(toy: &DiscreteToy, policy: &TablePolicy, formulation: Formulation, w: &RewardWeights) -> Result<f64> {
    let n = toy.spec_horizon();
    let prior = ToyPosterior::from_joint(toy, prior_joint(toy))?;
    let mut total = 0.0;
    walk(toy, policy, &mut |node| {
        let k = node.key.len();
        match formulation {
            Formulation::Tig if k == n => {
                // Independent route: posterior from the single-shot joint table.
                let post = direct_posterior(toy, node.history)?;
                total += mass_of(node) * kl_gain(toy, w, &post, &prior);
            }
            Formulation::Iig if k > 0 => {
                total += mass_of(node) * kl_gain(toy, w, node.posterior, node.parent.expect("non-root node"));
            }
            Formulation::OnePointTig if k == n => {
                for_truths(node, |m, t, e, v| total += v * one_point(toy, w, m, t, e, node.posterior, &prior));
            }
            Formulation::OnePointIig if k > 0 => {
                let parent = node.parent.expect("non-root node");
                for_truths(node, |m, t, e, v| total += v * one_point(toy, w, m, t, e, node.posterior, parent));
            }
            _ => {}
        }
        Ok(())
    })?;
    Ok(total)
}

/// Variational posteriors of a finite problem, indexed by stage and outcome prefix.
pub trait VariationalTables {
    /// `q(target | I_k)` for `k >= 1` (conditioned on `m` for parameters and predictions).
    fn table(&self, target: Target, key: &[usize], posterior: &ToyPosterior, m: usize) -> Vec<f64>;
}

/// The exact posterior itself.
pub struct ExactTables;

impl VariationalTables for ExactTables {
    fn table(&self, target: Target, _key: &[usize], posterior: &ToyPosterior, m: usize) -> Vec<f64> {
        posterior.target(target, m).to_vec()
    }
}

/// Each exact posterior mixed with a random PMF: `(1 - lambda) p + lambda r`.
///
/// The random PMF is a deterministic function of the seed, stage, prefix,
/// target and model, so the same table answers repeated queries identically.
pub struct PerturbedTables {
    pub seed: u64,
    pub lambda: f64,
}

impl VariationalTables for PerturbedTables {
    fn table(&self, target: Target, key: &[usize], posterior: &ToyPosterior, m: usize) -> Vec<f64> {
        let p = posterior.target(target, m);
        // The model table must not depend on which model is being scored.
        let mi = if target == Target::Model { u64::MAX } else { m as u64 };
        let mut path = vec![streams::MISC, target as u64, mi, key.len() as u64];
        path.extend(key.iter().map(|v| *v as u64));
        let mut rng = SeedTree::new(self.seed).rng(&path);
        let r: Vec<f64> = (0..p.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = r.iter().sum();
        p.iter().zip(&r).map(|(a, b)| (1.0 - self.lambda) * a + self.lambda * b / s).collect()
    }
}

/// Exact variational one-point utility.
///
/// Terminal mode uses only the final tables; incremental mode uses the
/// tables of every stage with the prior at stage zero.
pub fn exact_variational_utility(
    toy: &DiscreteToy,
    policy: &TablePolicy,
    q: &dyn VariationalTables,
    w: &RewardWeights,
    incremental: bool,
) -> Result<f64> {
    let n = toy.spec_horizon();
    let prior = ToyPosterior::from_joint(toy, prior_joint(toy))?;
    let log_q = |key: &[usize], post: &ToyPosterior, m: usize, t: usize, e: usize| -> f64 {
        if key.is_empty() {
            return stage_log(toy, w, &prior, m, t, e, |tg, mm| prior.target(tg, mm).to_vec());
        }
        stage_log(toy, w, post, m, t, e, |tg, mm| q.table(tg, key, post, mm))
    };
    let mut total = 0.0;
    let mut parent_keys: BTreeMap<Vec<usize>, ToyPosterior> = BTreeMap::new();
    walk(toy, policy, &mut |node| {
        let k = node.key.len();
        parent_keys.insert(node.key.to_vec(), node.posterior.clone());
        if (incremental && k > 0) || k == n {
            let pk = &node.key[..k.saturating_sub(1)];
            let before_key: &[usize] = if incremental { pk } else { &[] };
            let before_post = parent_keys.get(before_key).cloned().unwrap_or_else(|| prior.clone());
            if k == 0 {
                return Ok(());
            }
            for_truths(node, |m, t, e, v| {
                total += v * (log_q(node.key, node.posterior, m, t, e) - log_q(before_key, &before_post, m, t, e));
            });
        }
        Ok(())
    })?;
    Ok(total)
}

fn stage_log(
    toy: &DiscreteToy,
    w: &RewardWeights,
    _post: &ToyPosterior,
    m: usize,
    t: usize,
    e: usize,
    table: impl Fn(Target, usize) -> Vec<f64>,
) -> f64 {
    let mut l = 0.0;
    if w.alpha_m > 0.0 {
        l += w.alpha_m * table(Target::Model, m)[m].ln();
    }
    if w.alpha_theta > 0.0 {
        l += w.alpha_theta * table(Target::Theta, m)[t].ln();
    }
    if w.alpha_z > 0.0 && toy.n_z() > 0 {
        l += w.alpha_z * table(Target::Z, m)[toy.qoi_atom(m, t, e)].ln();
    }
    l
}

/// Largest deviation of `KL((m, theta)) = KL(m) + E_m KL(theta | m)` over terminal histories.
pub fn joint_decomposition_deviation(toy: &DiscreteToy, policy: &TablePolicy) -> Result<f64> {
    let n = toy.spec_horizon();
    let prior = ToyPosterior::from_joint(toy, prior_joint(toy))?;
    let flat = |p: &ToyPosterior| -> Vec<f64> {
        p.model.iter().enumerate().flat_map(|(m, pm)| p.theta[m].iter().map(move |t| pm * t)).collect()
    };
    let mut worst: f64 = 0.0;
    walk(toy, policy, &mut |node| {
        if node.key.len() == n {
            let joint = kl(&flat(node.posterior), &flat(&prior));
            let split = kl_gain(toy, &RewardWeights { alpha_m: 1.0, alpha_theta: 1.0, alpha_z: 0.0 }, node.posterior, &prior);
            worst = worst.max((joint - split).abs());
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Largest per-(history, truth) gap between summed one-point increments and the terminal one-point ratio.
pub fn one_point_telescoping_deviation(toy: &DiscreteToy, policy: &TablePolicy, w: &RewardWeights) -> Result<f64> {
    let n = toy.spec_horizon();
    let prior = ToyPosterior::from_joint(toy, prior_joint(toy))?;
    let mut chain: Vec<ToyPosterior> = Vec::new();
    let mut worst: f64 = 0.0;
    walk(toy, policy, &mut |node| {
        chain.truncate(node.key.len());
        chain.push(node.posterior.clone());
        if node.key.len() == n {
            for_truths(node, |m, t, e, _| {
                let inc: f64 = (0..n).map(|k| one_point(toy, w, m, t, e, &chain[k + 1], &chain[k])).sum();
                let term = one_point(toy, w, m, t, e, node.posterior, &prior);
                worst = worst.max((inc - term).abs());
            });
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Expected joint-KL gain over `(theta, z)` given the model, by explicit pushforward.
fn joint_theta_z_utility(toy: &DiscreteToy, policy: &TablePolicy) -> Result<f64> {
    let n = toy.spec_horizon();
    let prior = ToyPosterior::from_joint(toy, prior_joint(toy))?;
    let pairs = |p: &ToyPosterior, m: usize| -> Vec<f64> {
        let mut out = vec![0.0; toy.n_theta(m) * toy.n_z()];
        for (t, pt) in p.theta[m].iter().enumerate() {
            out[t * toy.n_z() + toy.qoi_atom(m, t, 0)] += pt;
        }
        out
    };
    let mut total = 0.0;
    walk(toy, policy, &mut |node| {
        if node.key.len() == n {
            let mut g = 0.0;
            for m in 0..toy.n_models() {
                if node.posterior.model[m] > 0.0 {
                    g += node.posterior.model[m] * kl(&pairs(node.posterior, m), &pairs(&prior, m));
                }
            }
            total += mass_of(node) * g;
        }
        Ok(())
    })?;
    Ok(total)
}

/// The joint `(theta, z)` utility and the double-count deviation
/// `|U(theta + z) - U_joint - U(z)|`, on problems without nuisance parameters.
pub fn double_count_check(toy: &DiscreteToy, policy: &TablePolicy) -> Result<(f64, f64)> {
    if toy.n_z() == 0 || (0..toy.n_models()).any(|m| toy.n_eta(m) > 1) {
        return Err(Error::Unsupported("double-count check needs a predictive quantity and no nuisance".into()));
    }
    let both = RewardWeights { alpha_m: 0.0, alpha_theta: 1.0, alpha_z: 1.0 };
    let z_only = RewardWeights { alpha_m: 0.0, alpha_theta: 0.0, alpha_z: 1.0 };
    let u_both = exact_expected_utility(toy, policy, Formulation::OnePointTig, &both)?;
    let u_z = exact_expected_utility(toy, policy, Formulation::OnePointTig, &z_only)?;
    let u_joint = joint_theta_z_utility(toy, policy)?;
    Ok((u_joint, (u_both - u_joint - u_z).abs()))
}

/// Certification settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub n_instances: usize,
    pub n_perturbations: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub generator: ToyGenerator,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self { n_instances: 100, n_perturbations: 100, tolerance: 1e-10, seed: 0, generator: ToyGenerator::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub n_theta: Vec<usize>,
    pub n_eta: Vec<usize>,
    pub n_y: usize,
    pub weights: RewardWeights,
    pub tig: f64,
    pub iig: f64,
    pub one_point_tig: f64,
    pub one_point_iig: f64,
    /// Largest pairwise gap among the four formulations.
    pub equivalence_deviation: f64,
    /// Largest `U(q) - U` over the perturbed tables; never positive beyond tolerance.
    pub bound_violation: f64,
    /// Smallest `U - U(q)` over the perturbed tables.
    pub min_bound_gap: f64,
    /// `|U(exact q) - U|`.
    pub tightness_gap: f64,
    /// Same as `tightness_gap` for the incremental variational form with perturbed intermediates.
    pub intermediate_cancellation_gap: f64,
    pub decomposition_deviation: f64,
    pub telescoping_deviation: f64,
    /// `|U(pi) - U(pi')|` for a one-entry perturbation of the policy.
    pub policy_sensitivity: f64,
    pub double_count_deviation: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub config: CertifyConfig,
    pub instances: Vec<InstanceReport>,
    pub n_passed: usize,
    pub passed: bool,
}

/// Certify the equivalence and lower-bound results on random instances.
pub fn certify_theorems(cfg: &CertifyConfig) -> Result<CertificationReport> {
    let tree = SeedTree::new(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.n_instances);
    for i in 0..cfg.n_instances {
        let mut rng = tree.rng(&[streams::CERTIFY, i as u64]);
        let mut gen = cfg.generator.clone();
        // Alternate between instances with and without a nuisance parameter.
        if i % 2 == 1 && gen.n_eta == 1 {
            gen.n_eta = 2;
        }
        let toy = gen.generate(&mut rng)?;
        let nuisance = (0..toy.n_models()).any(|m| toy.n_eta(m) > 1);
        let weights = loop {
            let w = RewardWeights { alpha_m: rng.random(), alpha_theta: rng.random(), alpha_z: rng.random() };
            if nuisance || !(w.alpha_theta == 1.0 && w.alpha_z == 1.0) {
                break w;
            }
        };
        let policy = TablePolicy::random(&toy, &mut rng);
        let u = [Formulation::Tig, Formulation::Iig, Formulation::OnePointTig, Formulation::OnePointIig]
            .map(|f| exact_expected_utility(&toy, &policy, f, &weights))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        let mut equivalence_deviation: f64 = 0.0;
        for a in &u {
            for b in &u {
                equivalence_deviation = equivalence_deviation.max((a - b).abs());
            }
        }
        let reference = u[0];
        let exact_q = exact_variational_utility(&toy, &policy, &ExactTables, &weights, false)?;
        let tightness_gap = (exact_q - reference).abs();
        let mut bound_violation = f64::NEG_INFINITY;
        let mut min_bound_gap = f64::INFINITY;
        for j in 0..cfg.n_perturbations {
            let lambda = rng.random_range(0.01..1.0);
            let q = PerturbedTables { seed: cfg.seed ^ ((i as u64) << 32) ^ j as u64, lambda };
            let v = exact_variational_utility(&toy, &policy, &q, &weights, false)?;
            bound_violation = bound_violation.max(v - reference);
            min_bound_gap = min_bound_gap.min(reference - v);
        }
        // Perturbed intermediates with exact final tables: the incremental form stays tight.
        let mixed = FinalExact { inner: PerturbedTables { seed: cfg.seed.wrapping_add(i as u64), lambda: 0.5 }, horizon: toy.spec_horizon() };
        let intermediate_cancellation_gap = (exact_variational_utility(&toy, &policy, &mixed, &weights, true)? - reference).abs();
        let decomposition_deviation = joint_decomposition_deviation(&toy, &policy)?;
        let telescoping_deviation = one_point_telescoping_deviation(&toy, &policy, &weights)?;
        let other = policy.perturbed(&toy, &mut rng);
        let policy_sensitivity = (exact_expected_utility(&toy, &other, Formulation::Tig, &weights)? - reference).abs();
        let double_count_deviation = if nuisance || toy.n_z() == 0 { None } else { Some(double_count_check(&toy, &policy)?.1) };
        let tol = cfg.tolerance;
        let passed = equivalence_deviation <= tol
            && bound_violation <= tol
            && tightness_gap <= tol
            && intermediate_cancellation_gap <= tol
            && decomposition_deviation <= 1e-12
            && telescoping_deviation <= tol
            && double_count_deviation.is_none_or(|d| d <= tol);
        instances.push(InstanceReport {
            index: i,
            n_theta: (0..toy.n_models()).map(|m| toy.n_theta(m)).collect(),
            n_eta: (0..toy.n_models()).map(|m| toy.n_eta(m)).collect(),
            n_y: toy.n_y(),
            weights,
            tig: u[0],
            iig: u[1],
            one_point_tig: u[2],
            one_point_iig: u[3],
            equivalence_deviation,
            bound_violation,
            min_bound_gap,
            tightness_gap,
            intermediate_cancellation_gap,
            decomposition_deviation,
            telescoping_deviation,
            policy_sensitivity,
            double_count_deviation,
            passed,
        });
    }
    let n_passed = instances.iter().filter(|r| r.passed).count();
    Ok(CertificationReport { config: cfg.clone(), passed: n_passed == instances.len(), n_passed, instances })
}

/// Exact tables at the final stage, another table source before it.
struct FinalExact<T> {
    inner: T,
    horizon: usize,
}

impl<T: VariationalTables> VariationalTables for FinalExact<T> {
    fn table(&self, target: Target, key: &[usize], posterior: &ToyPosterior, m: usize) -> Vec<f64> {
        if key.len() == self.horizon {
            ExactTables.table(target, key, posterior, m)
        } else {
            self.inner.table(target, key, posterior, m)
        }
    }
}
