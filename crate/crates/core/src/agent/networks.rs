use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::envs::EnvSpec;
use crate::error::{dim_err, Error, Result};
use crate::history::{actor_input_dim, write_actor_input, FeatureMap, History};
use crate::nn::{Activation, DenseNet, NetGrad, ParamSet};
use crate::registry::Registry;
use crate::rng::StreamRng;

/// A rule choosing the next design from the history so far.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    /// Design for stage `history.len()`. Deterministic policies ignore `rng`.
    fn design(&self, history: &History, rng: &mut StreamRng) -> Result<Vec<f64>>;
}

/// Deterministic policy network with a sigmoid head mapped onto the design box.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    net: DenseNet,
    lower: Vec<f64>,
    upper: Vec<f64>,
    fm: FeatureMap,
    horizon: usize,
}

impl Actor {
    pub fn new(spec: &EnvSpec, fm: FeatureMap, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        let input = actor_input_dim(spec.horizon, spec.n_d, spec.n_y);
        let net = DenseNet::mlp(input, hidden, spec.n_d, Activation::Relu, Activation::Sigmoid, rng)?;
        Self::from_net(net, spec, fm)
    }

    pub fn from_net(net: DenseNet, spec: &EnvSpec, fm: FeatureMap) -> Result<Self> {
        if net.input_dim() != actor_input_dim(spec.horizon, spec.n_d, spec.n_y) || net.output_dim() != spec.n_d {
            return Err(dim_err(format!("actor net {}->{} does not fit the problem", net.input_dim(), net.output_dim())));
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::Format("actor net must end in a sigmoid".into()));
        }
        Ok(Self { net, lower: spec.design_lower.clone(), upper: spec.design_upper.clone(), fm, horizon: spec.horizon })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn features(&self) -> &FeatureMap {
        &self.fm
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Actor inputs for `(history, stage)` pairs, one row each.
    pub fn inputs<'a>(&self, rows: impl ExactSizeIterator<Item = (&'a History, usize)>) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((rows.len(), self.input_dim()));
        for (mut row, (h, k)) in x.rows_mut().into_iter().zip(rows) {
            write_actor_input(h, k, self.horizon, &self.fm, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }

    /// `lower + (upper - lower) s` per row.
    pub fn designs_from_unit(&self, s: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(s.raw_dim(), |(r, j)| self.lower[j] + (self.upper[j] - self.lower[j]) * s[[r, j]])
    }

    /// Network features of raw designs.
    pub fn design_features(&self, d: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(d.raw_dim());
        for (src, mut dst) in d.rows().into_iter().zip(out.rows_mut()) {
            self.fm.design(&src.to_vec(), dst.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Derivative of the design features with respect to the sigmoid outputs.
    pub fn feature_slope(&self) -> Vec<f64> {
        (0..self.lower.len()).map(|j| (self.upper[j] - self.lower[j]) / self.fm.design_half_width[j]).collect()
    }

    pub fn act_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.designs_from_unit(&self.net.predict(x)?))
    }

    pub fn act(&self, history: &History, k: usize) -> Result<Vec<f64>> {
        let x = self.inputs(std::iter::once((history, k)))?;
        Ok(self.act_batch(x.view())?.row(0).to_vec())
    }
}

impl ParamSet for Actor {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

impl Policy for Actor {
    fn name(&self) -> &str {
        "actor"
    }

    fn design(&self, history: &History, _rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.act(history, history.len())
    }
}

/// Action-value network over the actor input and a design.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    net: DenseNet,
}

impl Critic {
    pub fn new(actor_input: usize, n_d: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        Ok(Self { net: DenseNet::mlp(actor_input + n_d, hidden, 1, Activation::Relu, Activation::Identity, rng)? })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(dim_err("critic must have a single output"));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// `[actor input, design features]` rows.
    pub fn input(x: ArrayView2<f64>, d_feat: ArrayView2<f64>) -> Array2<f64> {
        concatenate![Axis(1), x, d_feat]
    }

    pub fn q(&self, input: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict(input)?.column(0).to_vec())
    }
}

impl ParamSet for Critic {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}

/// Mean squared error of the critic against `targets` and its parameter gradient.
pub fn critic_loss_grad(critic: &Critic, input: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, NetGrad)> {
    if targets.len() != input.nrows() {
        return Err(dim_err(format!("{} targets for {} rows", targets.len(), input.nrows())));
    }
    let n = targets.len().max(1) as f64;
    let (q, tape) = critic.net.forward(input)?;
    let mut g = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let r = q[[i, 0]] - t;
        loss += r * r / n;
        g[[i, 0]] = 2.0 * r / n;
    }
    let (grad, _) = critic.net.backward(tape, &g)?;
    Ok((loss, grad))
}

/// Gradient of `-(1/n_batch) sum_rows Q(x, mu(x))` with respect to the actor parameters.
///
/// The critic is differentiated with respect to its design input and the
/// result is chained through the actor's sigmoid head. Returns the objective
/// `(1/n_batch) sum Q` and the gradient.
pub fn policy_gradient(actor: &Actor, critic: &Critic, x: ArrayView2<f64>, n_batch: usize) -> Result<(f64, NetGrad)> {
    chain_design_gradient(actor, x, n_batch, |feat| {
        let input = Critic::input(x, feat.view());
        let (q, tape) = critic.net.forward(input.view())?;
        let gin = critic.net.backward_input(tape, &Array2::ones(q.raw_dim()))?;
        let a = x.ncols();
        Ok((q.column(0).to_vec(), gin.slice(ndarray::s![.., a..]).to_owned()))
    })
}

/// Actor gradient for any action value given its design-feature gradient.
///
/// `value(features)` returns `Q` per row and `dQ / d features`.
pub fn chain_design_gradient(
    actor: &Actor,
    x: ArrayView2<f64>,
    n_batch: usize,
    value: impl FnOnce(&Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)>,
) -> Result<(f64, NetGrad)> {
    let (s, tape) = actor.net.forward(x)?;
    let feat = actor.design_features(actor.designs_from_unit(&s).view());
    let (q, dq) = value(&feat)?;
    let n = n_batch.max(1) as f64;
    let slope = actor.feature_slope();
    let ga = Array2::from_shape_fn(s.raw_dim(), |(r, j)| -dq[[r, j]] * slope[j] / n);
    let (grad, _) = actor.net.backward(tape, &ga)?;
    Ok((q.iter().sum::<f64>() / n, grad))
}

/// Designs drawn uniformly from the box at every stage.
pub struct UniformPolicy {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl UniformPolicy {
    pub fn new(spec: &EnvSpec) -> Self {
        Self { lower: spec.design_lower.clone(), upper: spec.design_upper.clone() }
    }
}

impl Policy for UniformPolicy {
    fn name(&self) -> &str {
        "uniform"
    }

    fn design(&self, _history: &History, rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok(self.lower.iter().zip(&self.upper).map(|(l, u)| rng.random_range(*l..=*u)).collect())
    }
}

/// A fixed design sequence, independent of the observations.
pub struct FixedPolicy {
    designs: Vec<Vec<f64>>,
}

impl FixedPolicy {
    pub fn new(spec: &EnvSpec, designs: Vec<Vec<f64>>) -> Result<Self> {
        if designs.len() != spec.horizon {
            return Err(Error::Config(format!("{} fixed designs for horizon {}", designs.len(), spec.horizon)));
        }
        for d in &designs {
            spec.check_design(d)?;
        }
        Ok(Self { designs })
    }
}

impl Policy for FixedPolicy {
    fn name(&self) -> &str {
        "fixed"
    }

    fn design(&self, history: &History, _rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.designs
            .get(history.len())
            .cloned()
            .ok_or_else(|| Error::InvalidParameter(format!("no fixed design for stage {}", history.len())))
    }
}

pub type PolicyConstructor = fn(&EnvSpec, &toml::Table) -> Result<Box<dyn Policy>>;

/// Policies that need no training.
pub fn policy_registry() -> Registry<PolicyConstructor> {
    let mut r: Registry<PolicyConstructor> = Registry::new("policy");
    r.register("uniform", |spec, _| Ok(Box::new(UniformPolicy::new(spec))))
        .register("fixed", |spec, t| {
            let designs = t
                .get("designs")
                .cloned()
                .ok_or_else(|| Error::Config("fixed policy needs `designs`".into()))?
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("designs: {e}")))?;
            Ok(Box::new(FixedPolicy::new(spec, designs)?))
        });
    r
}
