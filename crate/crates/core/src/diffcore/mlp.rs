use serde::{Deserialize, Serialize};

use super::matrix::{axpy, dot, Matrix};
use crate::rng::Rng;
use crate::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer: `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.rows() == other.weight.rows() && self.weight.cols() == other.weight.cols()
    }
}

/// Weights and biases of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
    activation: Activation,
    seed: u64,
}

/// Record of a batched forward pass: the input and every layer's output
/// (post-activation for hidden layers, linear for the last).
#[derive(Debug, Clone)]
pub struct Tape {
    input: Matrix,
    outputs: Vec<Matrix>,
}

impl Tape {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("tape has at least one layer")
    }
}

/// Parameter gradients, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Build a network with weights drawn from
/// `U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))` and zero biases.
///
/// Weights are drawn layer by layer in row-major order from one stream
/// seeded by `seed`.
pub fn mlp_init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::InvalidLayerSizes(layer_sizes.to_vec()));
    }
    let mut rng = Rng::new(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_in(-limit, limit))
                .collect();
            Dense {
                weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpParams {
        layers,
        activation,
        seed,
    })
}

impl MlpParams {
    /// Assemble a network from explicit layers.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidLayerSizes(vec![]));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::InvalidLayerSizes(vec![l.in_dim(), l.out_dim()]));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::non_finite("layer parameters"));
            }
        }
        Ok(MlpParams {
            layers,
            activation,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&h);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
                if l < last {
                    *zi = self.activation.apply(*zi);
                }
            }
            h = z;
        }
        h
    }

    /// Batched forward pass (one sample per row).
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(input)?.outputs.pop().expect("non-empty"))
    }

    /// Batched forward pass that keeps what [`MlpParams::backward`] needs.
    pub fn forward_tape(&self, input: &Matrix) -> Result<Tape> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let n = input.rows();
        let last = self.layers.len() - 1;
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { input } else { &outputs[l - 1] };
            let mut out = Matrix::zeros(n, layer.out_dim());
            for i in 0..n {
                let x = prev.row(i);
                let o = out.row_mut(i);
                for (j, (oj, w)) in o.iter_mut().zip(layer.weight.iter_rows()).enumerate() {
                    let z = dot(w, x) + layer.bias[j];
                    *oj = if l < last { self.activation.apply(z) } else { z };
                }
            }
            outputs.push(out);
        }
        Ok(Tape {
            input: input.clone(),
            outputs,
        })
    }

    /// Reverse sweep: given `dL/d(output)` per sample, return parameter
    /// gradients (summed over the batch) and `dL/d(input)` per sample.
    pub fn backward(&self, tape: &Tape, d_output: &Matrix) -> Result<(Gradients, Matrix)> {
        let n = tape.input.rows();
        if d_output.rows() != n || d_output.cols() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient is {}x{}, expected {n}x{}",
                d_output.rows(),
                d_output.cols(),
                self.output_dim()
            )));
        }
        if tape.outputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("tape from a different network".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_output.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let prev = if l == 0 { &tape.input } else { &tape.outputs[l - 1] };
            let g = &mut grads.layers[l];
            let mut d_prev = Matrix::zeros(n, layer.in_dim());
            for i in 0..n {
                let di = delta.row(i);
                let x = prev.row(i);
                let dp = d_prev.row_mut(i);
                for (j, &dij) in di.iter().enumerate() {
                    if dij == 0.0 {
                        continue;
                    }
                    g.bias[j] += dij;
                    axpy(dij, x, g.weight.row_mut(j));
                    axpy(dij, layer.weight.row(j), dp);
                }
            }
            if l > 0 {
                for (d, &y) in d_prev.as_mut_slice().iter_mut().zip(prev.as_slice()) {
                    *d *= self.activation.derivative_from_output(y);
                }
            }
            delta = d_prev;
        }
        Ok((grads, delta))
    }
}

/// Reverse-mode gradient of a batch loss.
///
/// `loss` maps the network outputs to `(value, dvalue/doutputs)`.
pub fn grad<F>(params: &MlpParams, inputs: &Matrix, loss: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&Matrix) -> (f64, Matrix),
{
    let tape = params.forward_tape(inputs)?;
    let (value, d_out) = loss(tape.output());
    if !value.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    let (grads, _) = params.backward(&tape, &d_out)?;
    Ok((value, grads))
}

/// Gradient of a scalar head of the network with respect to the input.
///
/// `head` maps the network output to `(value, dvalue/doutput)`.
pub fn input_grad<F>(params: &MlpParams, input: &[f64], head: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
    let tape = params.forward_tape(&x)?;
    let (value, d_out) = head(tape.output().row(0));
    if !value.is_finite() {
        return Err(Error::non_finite("scalar head"));
    }
    let d_out = Matrix::from_vec(1, d_out.len(), d_out)?;
    let (_, d_in) = params.backward(&tape, &d_out)?;
    Ok((value, d_in.into_vec()))
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, p)| g.same_shape(p))
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(s, b.weight.as_slice(), a.weight.as_mut_slice());
            axpy(s, &b.bias, &mut a.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Flattened view in checkpoint order (per layer: weights row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

impl MlpParams {
    /// Flattened parameters in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Overwrite parameters from a flat vector in checkpoint order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}
