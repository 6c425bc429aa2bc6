use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::{check_keys, field, EnvSpec, Environment, GroundTruth, PosteriorRange, Target};
use crate::error::{dim_err, Error, Result};
use crate::history::{FeatureMap, History, ObsTransform};
use crate::prob::sample_categorical;
use crate::rng::{SeedTree, StreamRng};

/// Fully tabulated finite problem.
///
/// Parameters, nuisances, observations and predictive quantities are atom
/// indices stored as `f64`. The design is a point of `[0, 1]`; the likelihood
/// at `d` interpolates linearly between design atoms placed evenly on
/// `[0, 1]`, so a design sitting on an atom recovers that atom's table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteToySpec {
    pub model_prior: Vec<f64>,
    /// `[m][theta]`
    pub theta_prior: Vec<Vec<f64>>,
    /// `[m][eta]`; a single atom means no nuisance parameter.
    pub eta_prior: Vec<Vec<f64>>,
    /// `[m][theta][eta][design atom][y]`
    pub likelihood: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[m][theta][eta]` predictive-quantity atom.
    pub qoi: Vec<Vec<Vec<usize>>>,
    pub n_z: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug)]
pub struct DiscreteToy {
    tables: DiscreteToySpec,
    n_atoms: usize,
    n_y: usize,
    spec: EnvSpec,
}

fn check_pmf(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter(format!("{what} has an empty or negative entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteToy {
    pub fn new(tables: DiscreteToySpec) -> Result<Self> {
        let m = tables.model_prior.len();
        check_pmf(&tables.model_prior, "model prior")?;
        if tables.theta_prior.len() != m || tables.eta_prior.len() != m || tables.likelihood.len() != m || tables.qoi.len() != m {
            return Err(dim_err("per-model tables disagree on the model count"));
        }
        let n_atoms = tables.likelihood[0].first().and_then(|t| t.first()).map(|e| e.len()).unwrap_or(0);
        let n_y = tables.likelihood[0].first().and_then(|t| t.first()).and_then(|e| e.first()).map(|a| a.len()).unwrap_or(0);
        if n_atoms == 0 || n_y == 0 {
            return Err(dim_err("likelihood table is empty"));
        }
        for mi in 0..m {
            check_pmf(&tables.theta_prior[mi], &format!("theta prior of model {mi}"))?;
            check_pmf(&tables.eta_prior[mi], &format!("eta prior of model {mi}"))?;
            let (nt, ne) = (tables.theta_prior[mi].len(), tables.eta_prior[mi].len());
            if tables.likelihood[mi].len() != nt || tables.qoi[mi].len() != nt {
                return Err(dim_err(format!("model {mi}: theta tables disagree")));
            }
            for t in 0..nt {
                if tables.likelihood[mi][t].len() != ne || tables.qoi[mi][t].len() != ne {
                    return Err(dim_err(format!("model {mi}: eta tables disagree")));
                }
                for e in 0..ne {
                    if tables.qoi[mi][t][e] >= tables.n_z.max(1) {
                        return Err(dim_err("qoi atom out of range"));
                    }
                    if tables.likelihood[mi][t][e].len() != n_atoms {
                        return Err(dim_err("design-atom count varies"));
                    }
                    for (a, row) in tables.likelihood[mi][t][e].iter().enumerate() {
                        if row.len() != n_y {
                            return Err(dim_err("observation count varies"));
                        }
                        check_pmf(row, &format!("likelihood [{mi}][{t}][{e}][{a}]"))?;
                    }
                }
            }
        }
        let nuisance = tables.eta_prior.iter().any(|e| e.len() > 1);
        let spec = EnvSpec {
            n_models: m,
            theta_dims: vec![1; m],
            eta_dims: vec![usize::from(nuisance); m],
            z_dims: vec![usize::from(tables.n_z > 0); m],
            n_d: 1,
            n_y: 1,
            design_lower: vec![0.0],
            design_upper: vec![1.0],
            horizon: tables.horizon,
        };
        Ok(Self { tables, n_atoms, n_y, spec })
    }

    pub fn from_table(t: &toml::Table) -> Result<Self> {
        if t.contains_key("model_prior") {
            let tables: DiscreteToySpec = toml::Value::Table(t.clone())
                .try_into()
                .map_err(|e| Error::Config(format!("discrete_toy tables: {e}")))?;
            return Self::new(tables);
        }
        check_keys(
            t,
            &["seed", "n_models", "max_theta", "max_y", "n_atoms", "n_eta", "n_z", "horizon"],
            "discrete_toy",
        )?;
        let g = ToyGenerator {
            n_models: field(t, "n_models", 2)?,
            max_theta: field(t, "max_theta", 3)?,
            max_y: field(t, "max_y", 3)?,
            n_atoms: field(t, "n_atoms", 2)?,
            n_eta: field(t, "n_eta", 1)?,
            n_z: field(t, "n_z", 2)?,
            horizon: field(t, "horizon", 2)?,
        };
        let seed: u64 = field(t, "seed", 0)?;
        g.generate(&mut SeedTree::new(seed).rng(&[0]))
    }

    pub fn tables(&self) -> &DiscreteToySpec {
        &self.tables
    }

    pub fn n_models(&self) -> usize {
        self.tables.model_prior.len()
    }

    pub fn n_theta(&self, m: usize) -> usize {
        self.tables.theta_prior[m].len()
    }

    pub fn n_eta(&self, m: usize) -> usize {
        self.tables.eta_prior[m].len()
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_z(&self) -> usize {
        self.tables.n_z
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    /// Design positions of the atoms.
    pub fn atom_designs(&self) -> Vec<f64> {
        if self.n_atoms == 1 {
            return vec![0.0];
        }
        (0..self.n_atoms).map(|j| j as f64 / (self.n_atoms - 1) as f64).collect()
    }

    fn interp(&self, d: f64) -> (usize, usize, f64) {
        if self.n_atoms == 1 {
            return (0, 0, 0.0);
        }
        let x = d.clamp(0.0, 1.0) * (self.n_atoms - 1) as f64;
        let j = (x.floor() as usize).min(self.n_atoms - 2);
        (j, j + 1, x - j as f64)
    }

    /// `p(y | m, theta, eta, d)`.
    pub fn lik(&self, m: usize, theta: usize, eta: usize, d: f64, y: usize) -> f64 {
        let rows = &self.tables.likelihood[m][theta][eta];
        let (a, b, w) = self.interp(d);
        if w == 0.0 {
            rows[a][y]
        } else {
            (1.0 - w) * rows[a][y] + w * rows[b][y]
        }
    }

    pub fn qoi_atom(&self, m: usize, theta: usize, eta: usize) -> usize {
        self.tables.qoi[m][theta][eta]
    }

    /// Prior mass of predictive atom `z` under model `m`.
    pub fn z_prior(&self, m: usize, z: usize) -> f64 {
        let mut p = 0.0;
        for t in 0..self.n_theta(m) {
            for e in 0..self.n_eta(m) {
                if self.qoi_atom(m, t, e) == z {
                    p += self.tables.theta_prior[m][t] * self.tables.eta_prior[m][e];
                }
            }
        }
        p
    }

    fn has_nuisance(&self) -> bool {
        self.spec.has_nuisance()
    }

    fn truth(&self, m: usize, t: usize, e: usize) -> GroundTruth {
        GroundTruth {
            model: m,
            theta: vec![t as f64],
            eta: if self.has_nuisance() { vec![e as f64] } else { Vec::new() },
            z: if self.tables.n_z > 0 { vec![self.qoi_atom(m, t, e) as f64] } else { Vec::new() },
            sim_index: None,
        }
    }

    /// Atom indices of a ground truth.
    pub fn indices(&self, truth: &GroundTruth) -> (usize, usize, usize) {
        let e = truth.eta.first().map(|v| *v as usize).unwrap_or(0);
        (truth.model, truth.theta[0] as usize, e)
    }
}

impl Environment for DiscreteToy {
    fn name(&self) -> &'static str {
        "discrete_toy"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> GroundTruth {
        let m = sample_categorical(&self.tables.model_prior, rng);
        let t = sample_categorical(&self.tables.theta_prior[m], rng);
        let e = sample_categorical(&self.tables.eta_prior[m], rng);
        self.truth(m, t, e)
    }

    fn sample_parameters(&self, model: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let t = sample_categorical(&self.tables.theta_prior[model], rng);
        let e = sample_categorical(&self.tables.eta_prior[model], rng);
        let truth = self.truth(model, t, e);
        (truth.theta, truth.eta)
    }

    fn observe(&self, truth: &GroundTruth, d: &[f64], _h: &History, rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.spec.check_design(d)?;
        let (m, t, e) = self.indices(truth);
        let probs: Vec<f64> = (0..self.n_y).map(|y| self.lik(m, t, e, d[0], y)).collect();
        Ok(vec![sample_categorical(&probs, rng) as f64])
    }

    fn predict_qoi(&self, model: usize, theta: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        if self.tables.n_z == 0 {
            return Err(Error::Unsupported("toy defines no predictive quantity".into()));
        }
        let e = eta.first().map(|v| *v as usize).unwrap_or(0);
        Ok(vec![self.qoi_atom(model, theta[0] as usize, e) as f64])
    }

    fn log_prior_model(&self, model: usize) -> f64 {
        self.tables.model_prior[model].ln()
    }

    fn log_prior_theta(&self, model: usize, theta: &[f64]) -> Option<f64> {
        Some(self.tables.theta_prior[model][theta[0] as usize].ln())
    }

    fn log_prior_z(&self, model: usize, z: &[f64]) -> Option<f64> {
        Some(self.z_prior(model, z[0] as usize).ln())
    }

    fn log_likelihood(&self, m: usize, theta: &[f64], eta: &[f64], d: &[f64], y: &[f64], _h: &History) -> Option<f64> {
        let e = eta.first().map(|v| *v as usize).unwrap_or(0);
        Some(self.lik(m, theta[0] as usize, e, d[0], y[0] as usize).ln())
    }

    fn features(&self) -> FeatureMap {
        let half = ((self.n_y as f64 - 1.0) / 2.0).max(0.5);
        FeatureMap::for_box(&[0.0], &[1.0], ObsTransform::Identity, vec![(self.n_y as f64 - 1.0) / 2.0], vec![half])
    }

    fn posterior_range(&self, target: Target, model: usize) -> Option<PosteriorRange> {
        let n = match target {
            Target::Theta => self.n_theta(model),
            Target::Z => self.n_z(),
            Target::Model => return None,
        } as f64;
        Some(PosteriorRange::uniform(1, (-0.5, n - 0.5), (0.05, n)))
    }

    fn as_discrete(&self) -> Option<&DiscreteToy> {
        Some(self)
    }
}

/// Random toy instances with bounded support sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub n_models: usize,
    pub max_theta: usize,
    pub max_y: usize,
    pub n_atoms: usize,
    pub n_eta: usize,
    pub n_z: usize,
    pub horizon: usize,
}

impl Default for ToyGenerator {
    fn default() -> Self {
        Self { n_models: 2, max_theta: 3, max_y: 3, n_atoms: 2, n_eta: 1, n_z: 2, horizon: 2 }
    }
}

fn random_pmf<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
    // Put the rounding residue on the largest entry so the sum is exact to 1e-15.
    let resid = 1.0 - p.iter().sum::<f64>();
    let i = (0..n).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap();
    p[i] += resid;
    p
}

impl ToyGenerator {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DiscreteToy> {
        if self.n_models == 0 || self.max_theta == 0 || self.max_y < 2 || self.n_atoms == 0 || self.n_eta == 0 {
            return Err(Error::Config("toy generator sizes must be positive (and at least two outcomes)".into()));
        }
        let n_y = rng.random_range(2..=self.max_y);
        let model_prior = random_pmf(self.n_models, rng);
        let mut theta_prior = Vec::new();
        let mut eta_prior = Vec::new();
        let mut likelihood = Vec::new();
        let mut qoi = Vec::new();
        for _ in 0..self.n_models {
            let nt = rng.random_range(1..=self.max_theta);
            theta_prior.push(random_pmf(nt, rng));
            eta_prior.push(random_pmf(self.n_eta, rng));
            likelihood.push(
                (0..nt)
                    .map(|_| (0..self.n_eta).map(|_| (0..self.n_atoms).map(|_| random_pmf(n_y, rng)).collect()).collect())
                    .collect(),
            );
            qoi.push(
                (0..nt)
                    .map(|_| (0..self.n_eta).map(|_| if self.n_z > 0 { rng.random_range(0..self.n_z) } else { 0 }).collect())
                    .collect(),
            );
        }
        DiscreteToy::new(DiscreteToySpec {
            model_prior,
            theta_prior,
            eta_prior,
            likelihood,
            qoi,
            n_z: self.n_z,
            horizon: self.horizon,
        })
    }
}
