//! Small dense-network core with hand-written reverse mode.
//!
//! Everything is `f64`. Parameters live in [`ParamTensor`]s, which carry a
//! gradient accumulator of the same shape; backward passes add into those
//! accumulators and optimizers read from them.

mod checkpoint;
mod cosine;
mod dense;
mod loss;
mod optim;

pub use checkpoint::Checkpoint;
pub use cosine::{
    cosine_backward, cosine_logits, cosine_logits_batch, CosineHead, COSINE_SCALE, NORM_EPS,
};
pub use dense::{Activation, Dense, EncoderConfig, Mlp, Tape};
pub use loss::{
    ce_loss, class_weights, focal_loss, log_softmax, softmax, weighted_ce_loss, LossConfig,
    LossKind,
};
pub use optim::{sgd_step, Adam};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// A named parameter matrix and its gradient accumulator. Vectors are
/// stored as `1 x n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Array2::zeros((rows, cols)))
    }

    /// Zero-mean Gaussian entries with standard deviation `sqrt(2 / fan_in)`.
    pub fn he<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Self::new(name, value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.value
            .iter()
            .chain(self.grad.iter())
            .all(|v| v.is_finite())
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values, flattened in declaration order.
    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    fn set_flat_values(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for p in self.params_mut() {
            for v in p.value.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[-1.0]), 0);
    }
}
