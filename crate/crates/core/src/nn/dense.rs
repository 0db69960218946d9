use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Module, ParamTensor};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W^T + b` over a batch of row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: ParamTensor,
    /// `1 x out`
    pub bias: ParamTensor,
}

impl Dense {
    /// He-initialized weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: ParamTensor::he(format!("{name}.weight"), output, input, input, rng),
            bias: ParamTensor::zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn from_parts(name: &str, weight: Array2<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(
            weight.nrows(),
            bias.len(),
            "bias length must match output rows"
        );
        let n = bias.len();
        Self {
            weight: ParamTensor::new(format!("{name}.weight"), weight),
            bias: ParamTensor::new(
                format!("{name}.bias"),
                Array2::from_shape_vec((1, n), bias).expect("1 x n bias"),
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value.t()) + &self.bias.value
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to `x`.
    pub fn backward(&mut self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad += &grad_out.t().dot(&x);
        self.bias.grad += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        grad_out.dot(&self.weight.value)
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            embed_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }
}

/// Activations recorded by [`Mlp::forward_recorded`] for one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.preacts.clear();
    }
}

/// Stack of dense layers with ReLU between them and a linear last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    /// Single square layer with identity weight and zero bias.
    pub fn identity(name: &str, dim: usize) -> Self {
        Self {
            layers: vec![Dense::from_parts(
                &format!("{name}.0"),
                Array2::eye(dim),
                vec![0.0; dim],
            )],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view());
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_recorded(&self, x: ArrayView2<f64>, tape: &mut Tape) -> Array2<f64> {
        tape.clear();
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            tape.inputs.push(h);
            if i < last {
                h = z.mapv(|v| v.max(0.0));
                tape.preacts.push(z);
            } else {
                h = z;
            }
        }
        h
    }

    /// Reverse pass over a recorded forward. Accumulates parameter
    /// gradients, empties the tape and returns the input gradient.
    pub fn backward(&mut self, tape: &mut Tape, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        if tape.is_empty() {
            return Err(Error::Usage(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if tape.inputs.len() != self.layers.len() || tape.preacts.len() + 1 != self.layers.len() {
            return Err(Error::Usage(
                "tape was recorded on a different network".into(),
            ));
        }
        let batch = tape.inputs[0].nrows();
        if grad_out.dim() != (batch, self.output_dim()) {
            return Err(Error::DimensionMismatch {
                expected: batch * self.output_dim(),
                got: grad_out.len(),
            });
        }
        let mut g = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g.zip_mut_with(&tape.preacts[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            g = self.layers[i].backward(tape.inputs[i].view(), g.view());
        }
        tape.clear();
        Ok(g)
    }

    /// Embeds a single vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward(row).into_raw_vec_and_offset().0)
    }

    /// Smallest |pre-activation| over the hidden layers for a batch; used
    /// by gradient checks to stay away from ReLU kinks.
    pub fn min_abs_preactivation(&self, x: ArrayView2<f64>) -> f64 {
        let mut tape = Tape::new();
        self.forward_recorded(x, &mut tape);
        tape.preacts
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
