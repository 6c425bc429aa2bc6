use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use super::{DensityPredictor, PredictorSpec};
use crate::envs::PosteriorRange;
use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, DenseNet, NetGrad, ParamSet};
use crate::prob::{diag_mixture_logpdf, sample_categorical, truncnorm_sample, MixtureGrad, TruncatedGaussianParams};
use crate::rng::StreamRng;

/// Mixture of diagonal Gaussians whose parameters are produced by a shared
/// feature network and three heads.
///
/// Means and standard deviations leave their heads through a sigmoid and are
/// mapped affinely onto the ranges of a [`PosteriorRange`]. Bounded
/// dimensions use truncated components.
#[derive(Clone, Debug)]
pub struct GmmNet {
    nets: Vec<DenseNet>,
    range: PosteriorRange,
    k: usize,
}

struct Heads {
    weights: Array2<f64>,
    means: Array2<f64>,
    stds: Array2<f64>,
}

impl GmmNet {
    pub fn new(spec: &PredictorSpec, rng: &mut StreamRng) -> Result<Self> {
        let dim = spec.range.dim();
        let k = spec.n_mixture;
        if k == 0 || dim == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component and one dimension".into()));
        }
        let (&feat, hidden) = spec
            .widths
            .gmm_feature
            .split_last()
            .ok_or_else(|| Error::Config("mixture feature net needs at least one layer".into()))?;
        let head = &spec.widths.gmm_head;
        let nets = vec![
            DenseNet::mlp(spec.cond_dim, hidden, feat, Activation::Relu, Activation::Relu, rng)?,
            DenseNet::mlp(feat, head, k, Activation::Relu, Activation::Softmax, rng)?,
            DenseNet::mlp(feat, head, k * dim, Activation::Relu, Activation::Sigmoid, rng)?,
            DenseNet::mlp(feat, head, k * dim, Activation::Relu, Activation::Sigmoid, rng)?,
        ];
        Ok(Self { nets, range: spec.range.clone(), k })
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn range(&self) -> &PosteriorRange {
        &self.range
    }

    fn map_means(&self, s: &mut Array2<f64>) {
        map_rows(s, &self.range.mean_lo, &self.range.mean_hi);
    }

    fn map_stds(&self, s: &mut Array2<f64>) {
        map_rows(s, &self.range.std_lo, &self.range.std_hi);
    }

    fn heads(&self, cond: ArrayView2<f64>) -> Result<Heads> {
        let f = self.nets[0].predict(cond)?;
        let weights = self.nets[1].predict(f.view())?;
        let mut means = self.nets[2].predict(f.view())?;
        let mut stds = self.nets[3].predict(f.view())?;
        self.map_means(&mut means);
        self.map_stds(&mut stds);
        Ok(Heads { weights, means, stds })
    }

    /// Mixture weights, means and standard deviations for one conditioning row.
    pub fn mixture(&self, cond: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let c = ArrayView2::from_shape((1, cond.len()), cond).map_err(|e| dim_err(e.to_string()))?;
        let h = self.heads(c)?;
        Ok((h.weights.row(0).to_vec(), h.means.row(0).to_vec(), h.stds.row(0).to_vec()))
    }

    fn check(&self, cond: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() || x.nrows() != cond.nrows() {
            return Err(dim_err(format!(
                "mixture input {}x{} with conditioning {}x{}",
                x.nrows(),
                x.ncols(),
                cond.nrows(),
                cond.ncols()
            )));
        }
        Ok(())
    }
}

/// `lo + (hi - lo) * s`, with the ranges repeating every `lo.len()` columns.
fn map_rows(s: &mut Array2<f64>, lo: &[f64], hi: &[f64]) {
    let d = lo.len();
    for mut row in s.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = lo[j % d] + (hi[j % d] - lo[j % d]) * *v;
        }
    }
}

impl ParamSet for GmmNet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.nets.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets.tensors_mut()
    }
}

impl DensityPredictor for GmmNet {
    fn family(&self) -> &'static str {
        "gmm"
    }

    fn dim(&self) -> usize {
        self.range.dim()
    }

    fn cond_dim(&self) -> usize {
        self.nets[0].input_dim()
    }

    fn log_prob(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check(&cond, &x)?;
        let h = self.heads(cond)?;
        Ok((0..x.nrows())
            .map(|i| {
                diag_mixture_logpdf(
                    &x.row(i).to_vec(),
                    h.weights.row(i).as_slice().unwrap(),
                    h.means.row(i).as_slice().unwrap(),
                    h.stds.row(i).as_slice().unwrap(),
                    &self.range.bounds,
                    None,
                )
            })
            .collect())
    }

    fn log_prob_grad(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>, coef: &[f64]) -> Result<(Vec<f64>, Vec<NetGrad>)> {
        self.check(&cond, &x)?;
        if coef.len() != x.nrows() {
            return Err(dim_err(format!("{} coefficients for {} rows", coef.len(), x.nrows())));
        }
        let (f, tf) = self.nets[0].forward(cond)?;
        let (weights, tw) = self.nets[1].forward(f.view())?;
        let (sm, tm) = self.nets[2].forward(f.view())?;
        let (ss, ts) = self.nets[3].forward(f.view())?;
        let (mut means, mut stds) = (sm, ss);
        self.map_means(&mut means);
        self.map_stds(&mut stds);

        let n = x.nrows();
        let d = self.dim();
        let mut gw = Array2::zeros(weights.raw_dim());
        let mut gm = Array2::zeros(means.raw_dim());
        let mut gs = Array2::zeros(stds.raw_dim());
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let xi = x.row(i).to_vec();
            let mut w_row = vec![0.0; self.k];
            let mut m_row = vec![0.0; self.k * d];
            let mut s_row = vec![0.0; self.k * d];
            let v = diag_mixture_logpdf(
                &xi,
                weights.row(i).as_slice().unwrap(),
                means.row(i).as_slice().unwrap(),
                stds.row(i).as_slice().unwrap(),
                &self.range.bounds,
                Some(MixtureGrad { weights: &mut w_row, means: &mut m_row, stds: &mut s_row }),
            );
            values.push(v);
            for (c, g) in w_row.iter().enumerate() {
                gw[[i, c]] = coef[i] * g;
            }
            for j in 0..self.k * d {
                let r = j % d;
                gm[[i, j]] = coef[i] * m_row[j] * (self.range.mean_hi[r] - self.range.mean_lo[r]);
                gs[[i, j]] = coef[i] * s_row[j] * (self.range.std_hi[r] - self.range.std_lo[r]);
            }
        }
        let (g1, fw) = self.nets[1].backward(tw, &gw)?;
        let (g2, fm) = self.nets[2].backward(tm, &gm)?;
        let (g3, fs) = self.nets[3].backward(ts, &gs)?;
        let gf = fw + fm + fs;
        let (g0, _) = self.nets[0].backward(tf, &gf)?;
        Ok((values, vec![g0, g1, g2, g3]))
    }

    fn sample(&self, cond: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let (w, m, s) = self.mixture(cond)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let c = sample_categorical(&w, rng);
            let mut x = Vec::with_capacity(d);
            for j in 0..d {
                let (mu, sd) = (m[c * d + j], s[c * d + j]);
                x.push(match self.range.bounds[j] {
                    Some((lo, hi)) => truncnorm_sample(&TruncatedGaussianParams::new(mu, sd, lo, hi)?, rng),
                    None => Normal::new(mu, sd).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng),
                });
            }
            out.push(x);
        }
        Ok(out)
    }

    fn nets(&self) -> &[DenseNet] {
        &self.nets
    }

    fn describe(&self) -> Value {
        json!({ "family": "gmm", "n_mixture": self.k, "range": self.range })
    }

    fn clone_box(&self) -> Box<dyn DensityPredictor> {
        Box::new(self.clone())
    }
}

impl GmmNet {
    /// Rebuild from stored nets and metadata.
    pub fn from_parts(nets: Vec<DenseNet>, meta: &Value) -> Result<Self> {
        let k = meta["n_mixture"].as_u64().ok_or_else(|| Error::Format("mixture metadata lacks n_mixture".into()))? as usize;
        let range: PosteriorRange = serde_json::from_value(meta["range"].clone())?;
        if nets.len() != 4 || nets[1].output_dim() != k || nets[2].output_dim() != k * range.dim() {
            return Err(Error::Format("mixture nets do not match metadata".into()));
        }
        Ok(Self { nets, range, k })
    }

    /// Mean over rows of the weight head, a cheap collapse diagnostic.
    pub fn mean_weights(&self, cond: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.heads(cond)?.weights.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default())
    }
}
