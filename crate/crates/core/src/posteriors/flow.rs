use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use super::{DensityPredictor, PredictorSpec};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, DenseNet, NetGrad, ParamSet, Tape};
use crate::prob::{floored_log, floored_log_slope, LN_SQRT_2PI};
use crate::rng::StreamRng;

/// Conditional affine-coupling flow.
///
/// The normalizing map `f` sends a target `x = (x1, x2)` to a standard
/// normal through `n_trans` blocks, each applying
/// `x2 <- x2 * exp(s1(h, x1)) + t1(h, x1)` and then
/// `x1 <- x1 * exp(s2(h, x2)) + t2(h, x2)`, where `h` is a learned feature
/// encoding of the conditioning input.
#[derive(Clone, Debug)]
pub struct FlowNet {
    /// `[feature, s1, t1, s2, t2, s1, t1, ...]`.
    nets: Vec<DenseNet>,
    dim: usize,
    n1: usize,
}

struct BlockTrace {
    a: Array2<f64>,
    b: Array2<f64>,
    s1: Array2<f64>,
    s2: Array2<f64>,
    tapes: [Tape; 4],
}

impl FlowNet {
    pub fn new(spec: &PredictorSpec, rng: &mut StreamRng) -> Result<Self> {
        let dim = spec.range.dim();
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "a coupling flow needs at least two dimensions, got {dim}; use the gmm family"
            )));
        }
        if spec.n_trans == 0 {
            return Err(Error::InvalidParameter("n_trans must be at least 1".into()));
        }
        let c = spec.cond_dim;
        let n1 = dim / 2;
        let n2 = dim - n1;
        let w = &spec.widths.flow_coupling;
        let mut nets = vec![DenseNet::mlp(c, &spec.widths.flow_feature, c, Activation::Relu, Activation::Identity, rng)?];
        for _ in 0..spec.n_trans {
            for (inp, out) in [(n1, n2), (n1, n2), (n2, n1), (n2, n1)] {
                let mut net = DenseNet::mlp(c + inp, w, out, Activation::Relu, Activation::Identity, rng)?;
                // Start every block at the identity map.
                if let Some(last) = net.layers_mut().last_mut() {
                    last.weight.fill(0.0);
                }
                nets.push(net);
            }
        }
        Ok(Self { nets, dim, n1 })
    }

    pub fn from_parts(nets: Vec<DenseNet>, meta: &Value) -> Result<Self> {
        let dim = meta["dim"].as_u64().ok_or_else(|| Error::Format("flow metadata lacks dim".into()))? as usize;
        if dim < 2 || nets.len() < 5 || (nets.len() - 1) % 4 != 0 {
            return Err(Error::Format("flow nets do not match metadata".into()));
        }
        let n1 = dim / 2;
        if nets[1].output_dim() != dim - n1 || nets[3].output_dim() != n1 {
            return Err(Error::Format("flow coupling widths do not match dim".into()));
        }
        Ok(Self { nets, dim, n1 })
    }

    pub fn n_trans(&self) -> usize {
        (self.nets.len() - 1) / 4
    }

    fn block(&self, i: usize) -> &[DenseNet] {
        &self.nets[1 + 4 * i..5 + 4 * i]
    }

    fn check(&self, cond: &ArrayView2<f64>, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim || x.nrows() != cond.nrows() || cond.ncols() != self.cond_dim() {
            return Err(dim_err(format!(
                "flow input {}x{} with conditioning {}x{}",
                x.nrows(),
                x.ncols(),
                cond.nrows(),
                cond.ncols()
            )));
        }
        Ok(())
    }

    /// Apply `f` and return `(xi, logdet)` per row.
    pub fn normalize(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check(&cond, &x)?;
        let h = self.nets[0].predict(cond)?;
        let mut a = x.slice(s![.., ..self.n1]).to_owned();
        let mut b = x.slice(s![.., self.n1..]).to_owned();
        let mut logdet = vec![0.0; x.nrows()];
        for i in 0..self.n_trans() {
            let nets = self.block(i);
            let in1 = concatenate![Axis(1), h, a];
            let s1 = nets[0].predict(in1.view())?;
            let t1 = nets[1].predict(in1.view())?;
            b = &b * &s1.mapv(f64::exp) + &t1;
            let in2 = concatenate![Axis(1), h, b];
            let s2 = nets[2].predict(in2.view())?;
            let t2 = nets[3].predict(in2.view())?;
            a = &a * &s2.mapv(f64::exp) + &t2;
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld += s1.row(r).sum() + s2.row(r).sum();
            }
        }
        Ok((concatenate![Axis(1), a, b], logdet))
    }

    /// Apply `g = f^{-1}` and return `(x, ln|det dg/dxi|)` per row.
    pub fn generate(&self, cond: ArrayView2<f64>, xi: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check(&cond, &xi)?;
        let h = self.nets[0].predict(cond)?;
        let mut a = xi.slice(s![.., ..self.n1]).to_owned();
        let mut b = xi.slice(s![.., self.n1..]).to_owned();
        let mut logdet = vec![0.0; xi.nrows()];
        for i in (0..self.n_trans()).rev() {
            let nets = self.block(i);
            let in2 = concatenate![Axis(1), h, b];
            let s2 = nets[2].predict(in2.view())?;
            let t2 = nets[3].predict(in2.view())?;
            a = (&a - &t2) * &s2.mapv(|v| (-v).exp());
            let in1 = concatenate![Axis(1), h, a];
            let s1 = nets[0].predict(in1.view())?;
            let t1 = nets[1].predict(in1.view())?;
            b = (&b - &t1) * &s1.mapv(|v| (-v).exp());
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld -= s1.row(r).sum() + s2.row(r).sum();
            }
        }
        Ok((concatenate![Axis(1), a, b], logdet))
    }
}

fn base_logpdf(row: ndarray::ArrayView1<f64>) -> f64 {
    -0.5 * row.dot(&row) - row.len() as f64 * LN_SQRT_2PI
}

impl ParamSet for FlowNet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.nets.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.nets.tensors_mut()
    }
}

impl DensityPredictor for FlowNet {
    fn family(&self) -> &'static str {
        "flow"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.nets[0].input_dim()
    }

    fn log_prob(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let (xi, logdet) = self.normalize(cond, x)?;
        Ok(xi.rows().into_iter().zip(logdet).map(|(r, ld)| floored_log(base_logpdf(r) + ld)).collect())
    }

    fn log_prob_grad(&self, cond: ArrayView2<f64>, x: ArrayView2<f64>, coef: &[f64]) -> Result<(Vec<f64>, Vec<NetGrad>)> {
        self.check(&cond, &x)?;
        if coef.len() != x.nrows() {
            return Err(dim_err(format!("{} coefficients for {} rows", coef.len(), x.nrows())));
        }
        let c = self.cond_dim();
        let n = x.nrows();
        let (h, th) = self.nets[0].forward(cond)?;
        let mut a = x.slice(s![.., ..self.n1]).to_owned();
        let mut b = x.slice(s![.., self.n1..]).to_owned();
        let mut logdet = vec![0.0; n];
        let mut traces = Vec::with_capacity(self.n_trans());
        for i in 0..self.n_trans() {
            let nets = self.block(i);
            let in1 = concatenate![Axis(1), h, a];
            let (s1, ts1) = nets[0].forward(in1.view())?;
            let (t1, tt1) = nets[1].forward(in1.view())?;
            let b_out = &b * &s1.mapv(f64::exp) + &t1;
            let in2 = concatenate![Axis(1), h, b_out];
            let (s2, ts2) = nets[2].forward(in2.view())?;
            let (t2, tt2) = nets[3].forward(in2.view())?;
            let a_out = &a * &s2.mapv(f64::exp) + &t2;
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld += s1.row(r).sum() + s2.row(r).sum();
            }
            traces.push(BlockTrace { a, b, s1, s2, tapes: [ts1, tt1, ts2, tt2] });
            a = a_out;
            b = b_out;
        }

        let mut values = Vec::with_capacity(n);
        let mut gl = vec![0.0; n];
        for r in 0..n {
            let l = base_logpdf(a.row(r)) + base_logpdf(b.row(r)) + logdet[r];
            values.push(floored_log(l));
            gl[r] = coef[r] * floored_log_slope(l);
        }
        let glc = Array2::from_shape_fn((n, 1), |(r, _)| gl[r]);
        let mut ga = -&a * &glc;
        let mut gb = -&b * &glc;
        let mut gh = Array2::<f64>::zeros((n, c));
        let mut grads: Vec<NetGrad> = Vec::with_capacity(self.nets.len());
        for (i, tr) in traces.into_iter().enumerate().rev() {
            let nets = self.block(i);
            let [ts1, tt1, ts2, tt2] = tr.tapes;
            let e2 = tr.s2.mapv(f64::exp);
            let gs2 = &ga * &tr.a * &e2 + &glc;
            let (gs2n, in_s2) = nets[2].backward(ts2, &gs2)?;
            let (gt2n, in_t2) = nets[3].backward(tt2, &ga)?;
            let gin2 = in_s2 + in_t2;
            gh += &gin2.slice(s![.., ..c]);
            gb += &gin2.slice(s![.., c..]);
            ga = &ga * &e2;

            let e1 = tr.s1.mapv(f64::exp);
            let gs1 = &gb * &tr.b * &e1 + &glc;
            let (gs1n, in_s1) = nets[0].backward(ts1, &gs1)?;
            let (gt1n, in_t1) = nets[1].backward(tt1, &gb)?;
            let gin1 = in_s1 + in_t1;
            gh += &gin1.slice(s![.., ..c]);
            ga += &gin1.slice(s![.., c..]);
            gb = &gb * &e1;
            // Pushed in reverse; flipped below.
            grads.extend([gt2n, gs2n, gt1n, gs1n]);
        }
        let (g0, _) = self.nets[0].backward(th, &gh)?;
        grads.push(g0);
        grads.reverse();
        Ok((values, grads))
    }

    fn sample(&self, cond: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<Vec<f64>>> {
        let xi = Array2::from_shape_simple_fn((n, self.dim), || StandardNormal.sample(rng));
        let c = Array2::from_shape_fn((n, cond.len()), |(_, j)| cond[j]);
        let (x, _) = self.generate(c.view(), xi.view())?;
        Ok(x.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn nets(&self) -> &[DenseNet] {
        &self.nets
    }

    fn describe(&self) -> Value {
        json!({ "family": "flow", "dim": self.dim, "n_trans": self.n_trans() })
    }

    fn clone_box(&self) -> Box<dyn DensityPredictor> {
        Box::new(self.clone())
    }
}
