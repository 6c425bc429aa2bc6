use ndarray::{Array2, ArrayView2};
use serde_json::{json, Value};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, DenseNet, NetGrad, ParamSet};
use crate::prob::DiscreteDist;
use crate::rng::StreamRng;

/// Categorical posterior over candidate models.
#[derive(Clone, Debug)]
pub struct ModelPosteriorNet {
    net: DenseNet,
}

impl ModelPosteriorNet {
    pub fn new(cond_dim: usize, n_models: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self> {
        if n_models < 2 {
            return Err(Error::InvalidParameter("a model posterior needs at least two models".into()));
        }
        Ok(Self { net: DenseNet::mlp(cond_dim, hidden, n_models, Activation::Relu, Activation::LogSoftmax, rng)? })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        match net.layers().last() {
            Some(l) if l.activation == Activation::LogSoftmax => Ok(Self { net }),
            _ => Err(Error::Format("model posterior net must end in log-softmax".into())),
        }
    }

    pub fn n_models(&self) -> usize {
        self.net.output_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// Log-probabilities of every model, one row per conditioning row.
    pub fn log_probs(&self, cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict(cond)
    }

    pub fn distribution(&self, cond: &[f64]) -> Result<DiscreteDist> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).map_err(|e| dim_err(e.to_string()))?;
        let lp = self.log_probs(c)?;
        DiscreteDist::new(lp.row(0).iter().map(|v| v.exp()).collect())
    }

    fn check_models(&self, models: &[usize], rows: usize) -> Result<()> {
        if models.len() != rows {
            return Err(dim_err(format!("{} model labels for {rows} rows", models.len())));
        }
        if let Some(m) = models.iter().find(|m| **m >= self.n_models()) {
            return Err(Error::InvalidParameter(format!("model index {m} out of range")));
        }
        Ok(())
    }

    /// `ln q(m_i | c_i)` per row.
    pub fn log_prob(&self, cond: ArrayView2<f64>, models: &[usize]) -> Result<Vec<f64>> {
        self.check_models(models, cond.nrows())?;
        let lp = self.log_probs(cond)?;
        Ok(models.iter().enumerate().map(|(i, &m)| lp[[i, m]]).collect())
    }

    /// Values and gradient of `sum_i coef_i ln q(m_i | c_i)`.
    pub fn log_prob_grad(&self, cond: ArrayView2<f64>, models: &[usize], coef: &[f64]) -> Result<(Vec<f64>, NetGrad)> {
        self.check_models(models, cond.nrows())?;
        if coef.len() != models.len() {
            return Err(dim_err(format!("{} coefficients for {} rows", coef.len(), models.len())));
        }
        let (lp, tape) = self.net.forward(cond)?;
        let mut g = Array2::zeros(lp.raw_dim());
        for (i, &m) in models.iter().enumerate() {
            g[[i, m]] = coef[i];
        }
        let values = models.iter().enumerate().map(|(i, &m)| lp[[i, m]]).collect();
        let (grad, _) = self.net.backward(tape, &g)?;
        Ok((values, grad))
    }

    pub fn sample(&self, cond: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
        let d = self.distribution(cond)?;
        Ok((0..n).map(|_| d.sample(rng)).collect())
    }

    pub fn describe(&self) -> Value {
        json!({ "family": "model", "n_models": self.n_models() })
    }
}

impl ParamSet for ModelPosteriorNet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }
}
