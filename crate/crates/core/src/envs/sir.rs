use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_keys, field, EnvSpec, Environment, GroundTruth, PosteriorRange, Target};
use crate::error::{Error, Result};
use crate::history::{FeatureMap, History, ObsTransform};
use crate::prob::normal_logpdf;
use crate::rng::{streams, SeedTree, StreamRng};

const MAGIC: &[u8; 8] = b"SDSIRBK1";

/// Epidemic constants and the stored time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    /// Population size; not fixed by the model, so it is explicit configuration.
    pub population: f64,
    /// Initially infected count; explicit configuration for the same reason.
    pub initial_infected: f64,
    pub t_end: f64,
    pub grid_points: usize,
    pub dt: f64,
}

impl Default for SirParams {
    fn default() -> Self {
        Self { population: 500.0, initial_infected: 2.0, t_end: 100.0, grid_points: 101, dt: 0.01 }
    }
}

impl SirParams {
    pub fn grid_spacing(&self) -> f64 {
        self.t_end / (self.grid_points - 1) as f64
    }

    fn steps_per_point(&self) -> Result<usize> {
        let r = self.grid_spacing() / self.dt;
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 * r {
            return Err(Error::Config(format!("dt {} does not divide the grid spacing", self.dt)));
        }
        Ok(n as usize)
    }
}

/// Integrate the epidemic from the initial state, recording `I` on the grid.
///
/// Each step is Euler-Maruyama with a trapezoidal drift: the diffusion is
/// taken at the left point, so the scheme stays consistent with the Ito
/// equation, while the drift is averaged over the start and an Euler
/// predictor. Without `noise` this is Heun's method on the deterministic
/// system. States are kept nonnegative with `S + I` never above the
/// population.
pub fn integrate_sir(beta: f64, rho: f64, p: &SirParams, noise: Option<&mut StreamRng>) -> Result<Vec<f64>> {
    Ok(integrate_sir_states(beta, rho, p, noise)?.1)
}

/// Like [`integrate_sir`] but returning both `S` and `I` on the grid.
pub fn integrate_sir_states(
    beta: f64,
    rho: f64,
    p: &SirParams,
    mut noise: Option<&mut StreamRng>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let per = p.steps_per_point()?;
    let n = p.population;
    let dt = p.dt;
    let sq = dt.sqrt();
    let mut s = n - p.initial_infected;
    let mut i = p.initial_infected;
    let mut out = Vec::with_capacity(p.grid_points);
    let mut out_s = Vec::with_capacity(p.grid_points);
    out.push(i);
    out_s.push(s);
    for _ in 1..p.grid_points {
        for _ in 0..per {
            let a = beta * s * i / n;
            let r = rho * i;
            let (mut ws, mut wi) = (0.0, 0.0);
            if let Some(rng) = noise.as_deref_mut() {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let ga = a.max(0.0).sqrt() * sq;
                let gr = r.max(0.0).sqrt() * sq;
                ws = -ga * e1;
                wi = ga * e1 - gr * e2;
            }
            let ps = (s - a * dt + ws).clamp(0.0, n);
            let pi = (i + (a - r) * dt + wi).clamp(0.0, n - ps);
            let a1 = beta * ps * pi / n;
            let r1 = rho * pi;
            s = (s - 0.5 * (a + a1) * dt + ws).clamp(0.0, n);
            i = (i + 0.5 * (a - r + a1 - r1) * dt + wi).clamp(0.0, n - s);
        }
        out.push(i);
        out_s.push(s);
    }
    Ok((out_s, out))
}

/// Pre-simulated trajectories with their `(ln beta, ln rho)` draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SimBank {
    pub params: SirParams,
    pub thetas: Vec<[f64; 2]>,
    /// Row-major `[count, grid_points]` infected counts.
    pub infected: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    count: usize,
    params: SirParams,
}

pub const LOG_BETA_PRIOR: (f64, f64) = (-std::f64::consts::LN_2, 0.5);

/// `ln 0.1`, standard deviation 0.5.
pub fn log_rho_prior() -> (f64, f64) {
    (0.1f64.ln(), 0.5)
}

/// Simulate `n` trajectories with parameters drawn from the prior.
pub fn simulate_sir_bank(n: usize, params: &SirParams, seeds: &SeedTree) -> Result<SimBank> {
    if n == 0 {
        return Err(Error::Config("bank size must be positive".into()));
    }
    let mut thetas = Vec::with_capacity(n);
    let mut infected = Vec::with_capacity(n * params.grid_points);
    for j in 0..n {
        let mut rng = seeds.rng(&[streams::BANK, j as u64]);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let lb = LOG_BETA_PRIOR.0 + LOG_BETA_PRIOR.1 * e1;
        let lr = log_rho_prior().0 + log_rho_prior().1 * e2;
        infected.extend(integrate_sir(lb.exp(), lr.exp(), params, Some(&mut rng))?);
        thetas.push([lb, lr]);
    }
    Ok(SimBank { params: params.clone(), thetas, infected })
}

impl SimBank {
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn trajectory(&self, j: usize) -> &[f64] {
        let g = self.params.grid_points;
        &self.infected[j * g..(j + 1) * g]
    }

    /// Grid index nearest to time `t`.
    pub fn grid_index(&self, t: f64) -> usize {
        let idx = (t / self.params.grid_spacing()).round();
        idx.clamp(0.0, (self.params.grid_points - 1) as f64) as usize
    }

    pub fn lookup(&self, j: usize, t: f64) -> f64 {
        self.trajectory(j)[self.grid_index(t)]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&BankHeader { count: self.len(), params: self.params.clone() })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity((self.len() * 2 + self.infected.len()) * 8);
        for t in &self.thetas {
            buf.extend_from_slice(&t[0].to_le_bytes());
            buf.extend_from_slice(&t[1].to_le_bytes());
        }
        for v in &self.infected {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a simulation bank file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: BankHeader = serde_json::from_slice(&header)?;
        let n = header.count;
        let g = header.params.grid_points;
        let mut raw = vec![0u8; (n * 2 + n * g) * 8];
        r.read_exact(&mut raw)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let thetas = vals[..2 * n].chunks(2).map(|c| [c[0], c[1]]).collect();
        Ok(SimBank { params: header.params, thetas, infected: vals[2 * n..].to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Stochastic SIR epidemic observed through a simulation bank.
///
/// The design is a measurement time and the observation is the infected
/// count at the nearest stored grid time.
#[derive(Clone, Debug)]
pub struct Sir {
    bank: Arc<SimBank>,
    spec: EnvSpec,
}

impl Sir {
    pub fn new(bank: Arc<SimBank>, horizon: usize) -> Self {
        let t_end = bank.params.t_end;
        Self {
            bank,
            spec: EnvSpec {
                n_models: 1,
                theta_dims: vec![2],
                eta_dims: vec![0],
                z_dims: vec![0],
                n_d: 1,
                n_y: 1,
                design_lower: vec![0.0],
                design_upper: vec![t_end],
                horizon,
            },
        }
    }

    pub fn bank(&self) -> &SimBank {
        &self.bank
    }

    pub fn from_table(t: &toml::Table) -> Result<Self> {
        check_keys(
            t,
            &["horizon", "bank_path", "bank_size", "bank_seed", "population", "initial_infected", "dt"],
            "sir",
        )?;
        let horizon = field(t, "horizon", 10)?;
        let bank = match field::<Option<String>>(t, "bank_path", None)? {
            Some(path) => SimBank::load(Path::new(&path))?,
            None => {
                let defaults = SirParams::default();
                let params = SirParams {
                    population: field(t, "population", defaults.population)?,
                    initial_infected: field(t, "initial_infected", defaults.initial_infected)?,
                    dt: field(t, "dt", defaults.dt)?,
                    ..defaults
                };
                let seed: u64 = field(t, "bank_seed", 0)?;
                simulate_sir_bank(field(t, "bank_size", 10_000)?, &params, &SeedTree::new(seed))?
            }
        };
        Ok(Self::new(Arc::new(bank), horizon))
    }
}

impl Environment for Sir {
    fn name(&self) -> &'static str {
        "sir"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> GroundTruth {
        let j = rng.random_range(0..self.bank.len());
        GroundTruth { model: 0, theta: self.bank.thetas[j].to_vec(), eta: Vec::new(), z: Vec::new(), sim_index: Some(j) }
    }

    fn sample_parameters(&self, _model: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        (
            vec![LOG_BETA_PRIOR.0 + LOG_BETA_PRIOR.1 * e1, log_rho_prior().0 + log_rho_prior().1 * e2],
            Vec::new(),
        )
    }

    fn observe(&self, truth: &GroundTruth, d: &[f64], _h: &History, _rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.spec.check_design(d)?;
        let j = truth
            .sim_index
            .ok_or_else(|| Error::InvalidParameter("SIR truth without a bank trajectory".into()))?;
        Ok(vec![self.bank.lookup(j, d[0])])
    }

    fn log_prior_theta(&self, _model: usize, theta: &[f64]) -> Option<f64> {
        Some(
            normal_logpdf(theta[0], LOG_BETA_PRIOR.0, LOG_BETA_PRIOR.1)
                + normal_logpdf(theta[1], log_rho_prior().0, log_rho_prior().1),
        )
    }

    fn features(&self) -> FeatureMap {
        FeatureMap::for_box(&self.spec.design_lower, &self.spec.design_upper, ObsTransform::Ln1p, vec![3.0], vec![3.0])
    }

    fn posterior_range(&self, target: Target, _model: usize) -> Option<PosteriorRange> {
        match target {
            Target::Theta => Some(PosteriorRange::uniform(2, (-6.0, 4.0), (1e-5, 0.5))),
            _ => None,
        }
    }
}
