//! Dense feed-forward networks with a hand-written reverse pass.
//!
//! A forward pass returns a [`Tape`] holding every layer's input and output.
//! `backward` takes the tape by value, so a tape can only ever feed one
//! reverse pass.

mod adam;
pub mod io;

pub use adam::Adam;
pub use io::TensorArchive;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Identity,
}

impl Activation {
    fn is_row_wise(self) -> bool {
        matches!(self, Activation::Softmax | Activation::LogSoftmax)
    }

    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Identity => {}
            Activation::Softmax | Activation::LogSoftmax => {
                for mut row in z.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    if self == Activation::Softmax {
                        row.mapv_inplace(|v| (v - lse).exp());
                    } else {
                        row.mapv_inplace(|v| v - lse);
                    }
                }
            }
        }
    }

    /// Turn a gradient with respect to the activation output into one with
    /// respect to its input, given the output `y`.
    fn backprop(self, y: &Array2<f64>, g: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(g).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Sigmoid => Zip::from(g).and(y).for_each(|g, &y| *g *= y * (1.0 - y)),
            Activation::Softmax => {
                for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut gr).and(&yr).for_each(|g, &y| *g = y * (*g - dot));
                }
            }
            Activation::LogSoftmax => {
                for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                    let total: f64 = gr.sum();
                    Zip::from(&mut gr).and(&yr).for_each(|g, &y| *g -= y.exp() * total);
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// One affine layer `y = act(x W + b)`, with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    input_dim: usize,
}

/// Forward values recorded for one batch.
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Tape {
    /// Output of the final layer.
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().unwrap_or(&self.inputs[0])
    }
}

/// Parameter gradients shaped like a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl NetGrad {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrad {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }
}

/// Anything exposing its parameters as an ordered list of flat slices.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(dim_err(format!("{} values for {n} parameters", values.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }
}

impl ParamSet for DenseNet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }
}

impl ParamSet for NetGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()])
            .collect()
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// `target <- (1 - rate) target + rate online`.
pub fn soft_update<P: ParamSet>(target: &mut P, online: &P, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!("soft update rate {rate} outside (0, 1]")));
    }
    let src = online.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(dim_err("soft update between differently shaped parameter sets"));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        for (t, &o) in d.iter_mut().zip(s) {
            *t = (1.0 - rate) * *t + rate * o;
        }
    }
    Ok(())
}

impl DenseNet {
    /// Build from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidParameter("network without layers".into()))?;
        let input_dim = first.input_dim();
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(dim_err(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(dim_err(format!("layer {i} bias length {}", l.bias.len())));
            }
            if l.activation.is_row_wise() && i + 1 != layers.len() {
                return Err(Error::InvalidParameter(
                    "softmax activations are only allowed on the final layer".into(),
                ));
            }
        }
        Ok(Self { layers, input_dim })
    }

    /// A multilayer perceptron `input -> hidden... -> output`.
    ///
    /// ReLU layers get Kaiming-uniform weights, every other layer
    /// Xavier-uniform; biases start at zero.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() { output_act } else { hidden_act };
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = match act {
                    Activation::Relu => (6.0 / fan_in.max(1) as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
                };
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
                Layer { weight, bias: Array1::zeros(fan_out), activation: act }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim()).unwrap_or(self.input_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(dim_err(format!(
                "network expects input width {}, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight);
        z += &layer.bias;
        layer.activation.apply(&mut z);
        z
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut cur = x.to_owned();
        for l in &self.layers {
            cur = Self::layer_forward(l, &cur.view());
        }
        Ok(cur)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for l in &self.layers {
            let next = Self::layer_forward(l, &cur.view());
            inputs.push(cur);
            cur = next;
            outputs.push(cur.clone());
        }
        Ok((cur, Tape { inputs, outputs }))
    }

    fn check_grad(&self, tape: &Tape, g: &Array2<f64>) -> Result<()> {
        let out = tape.output();
        if g.dim() != out.dim() {
            return Err(dim_err(format!(
                "output gradient shaped {:?}, output shaped {:?}",
                g.dim(),
                out.dim()
            )));
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::InvalidParameter("tape was recorded by a different network".into()));
        }
        Ok(())
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the input batch.
    pub fn backward(&self, tape: Tape, output_grad: &Array2<f64>) -> Result<(NetGrad, Array2<f64>)> {
        self.check_grad(&tape, output_grad)?;
        let Tape { inputs, outputs } = tape;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for ((layer, x), y) in self.layers.iter().zip(&inputs).zip(&outputs).rev() {
            layer.activation.backprop(y, &mut g);
            let gw = x.t().dot(&g).as_standard_layout().into_owned();
            let gb = g.sum_axis(Axis(0)).as_standard_layout().into_owned();
            g = g.dot(&layer.weight.t());
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok((NetGrad { layers: grads }, g))
    }

    /// Reverse pass that skips parameter gradients.
    pub fn backward_input(&self, tape: Tape, output_grad: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_grad(&tape, output_grad)?;
        let mut g = output_grad.clone();
        for (layer, y) in self.layers.iter().zip(&tape.outputs).rev() {
            layer.activation.backprop(y, &mut g);
            g = g.dot(&layer.weight.t());
        }
        Ok(g)
    }
}
