//! Cross-entropy variants over a single logit vector, plus a batched
//! wrapper that averages over rows.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::ShotVector;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - one_hot`.
pub fn ce_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Inverse-frequency weights normalized so that a balanced support gives
/// weight 1 for every class: `w_c = sum(K) / (N * K_c)`.
pub fn class_weights(counts: &ShotVector) -> Vec<f64> {
    let total = counts.total() as f64;
    let way = counts.way() as f64;
    counts
        .counts()
        .iter()
        .map(|&k| total / (way * k as f64))
        .collect()
}

pub fn weighted_ce_loss(logits: &[f64], label: usize, counts: &ShotVector) -> (f64, Vec<f64>) {
    let w = class_weights(counts)[label];
    let (loss, grad) = ce_loss(logits, label);
    (w * loss, grad.into_iter().map(|g| w * g).collect())
}

/// `-alpha (1 - p_t)^gamma log p_t` with `p_t = softmax(logits)[label]`.
pub fn focal_loss(logits: &[f64], label: usize, gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let log_p = log_softmax(logits)[label];
    let p = log_p.exp();
    let q = 1.0 - p;
    let loss = alpha * q.powf(gamma) * -log_p;
    // dL/dz_j = coef * (softmax_j - onehot_j) with
    // coef = alpha * ((1-p)^gamma - gamma (1-p)^(gamma-1) p log p).
    let focus = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p * log_p
    };
    let coef = alpha * (q.powf(gamma) - focus);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad.into_iter().map(|g| coef * g).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ce,
    WeightedCe,
    Focal,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::WeightedCe => "weighted_ce",
            LossKind::Focal => "focal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn ce() -> Self {
        Self::default()
    }

    pub fn weighted() -> Self {
        Self {
            kind: LossKind::WeightedCe,
            ..Self::default()
        }
    }

    pub fn focal(gamma: f64, alpha: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            focal_gamma: gamma,
            focal_alpha: alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0) {
            return Err(Error::InvalidSpec(
                "focal loss needs gamma >= 0 and alpha > 0".into(),
            ));
        }
        Ok(())
    }

    /// Loss and logit gradient for one sample. `counts` are the support
    /// class counts, used only by the weighted variant.
    pub fn loss(&self, logits: &[f64], label: usize, counts: &ShotVector) -> (f64, Vec<f64>) {
        match self.kind {
            LossKind::Ce => ce_loss(logits, label),
            LossKind::WeightedCe => weighted_ce_loss(logits, label, counts),
            LossKind::Focal => focal_loss(logits, label, self.focal_gamma, self.focal_alpha),
        }
    }

    /// Mean loss over the rows of `logits` and the gradient of that mean.
    pub fn batch(
        &self,
        logits: ArrayView2<f64>,
        labels: &[usize],
        counts: &ShotVector,
    ) -> (f64, Array2<f64>) {
        let n = labels.len();
        assert_eq!(logits.nrows(), n, "one label per logit row");
        let mut grad = Array2::zeros(logits.raw_dim());
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i).to_vec();
            let (l, g) = self.loss(&row, label, counts);
            total += l;
            for (dst, gv) in grad.row_mut(i).iter_mut().zip(g) {
                *dst = gv / n as f64;
            }
        }
        (total / n as f64, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::verify::numerical_gradient;
    use rand::Rng;

    fn shots(v: &[usize]) -> ShotVector {
        ShotVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_way() {
        let (l, g) = ce_loss(&[0.3; 5], 2);
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn confident_logit_loss() {
        // -log(e^10 / (e^10 + 4)) = ln(1 + 4 e^-10)
        let (l, _) = ce_loss(&[10.0, 0.0, 0.0, 0.0, 0.0], 0);
        let expected = (1.0 + 4.0 * (-10f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 1.816e-4).abs() < 1e-7);
    }

    #[test]
    fn softmax_sums_to_one_and_grads_to_zero() {
        let mut rng = seed::rng(0);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..7).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert!((softmax(&z).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (_, g) = ce_loss(&z, rng.random_range(0..7));
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights(&shots(&[5; 5])), vec![1.0; 5]);
        let w = class_weights(&shots(&[1, 9, 9, 9, 9]));
        assert!((w[0] - 7.4).abs() < 1e-12);
        assert!((w[1] - 37.0 / 45.0).abs() < 1e-12);
        assert!((w[1] - 0.8222).abs() < 1e-4);
    }

    #[test]
    fn weighted_balanced_is_bitwise_ce() {
        let mut rng = seed::rng(1);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = rng.random_range(0..5);
            assert_eq!(weighted_ce_loss(&z, y, &shots(&[3; 5])), ce_loss(&z, y));
        }
    }

    #[test]
    fn focal_reduces_to_ce() {
        let mut rng = seed::rng(2);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = rng.random_range(0..5);
            assert_eq!(focal_loss(&z, y, 0.0, 1.0), ce_loss(&z, y));
        }
    }

    #[test]
    fn focal_vanishes_faster_when_confident() {
        let z = [8.0, 0.0, 0.0];
        let (ce, _) = ce_loss(&z, 0);
        let (fl, _) = focal_loss(&z, 0, 2.0, 1.0);
        let p = softmax(&z)[0];
        assert!((fl / ce - (1.0 - p).powi(2)).abs() < 1e-12);
        assert!(fl < ce);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = rng.random_range(0..5);
            let gamma = rng.random_range(0.0..4.0);
            let (_, g) = focal_loss(&z, y, gamma, 0.75);
            let n = numerical_gradient(|x| focal_loss(x, y, gamma, 0.75).0, &z, 1e-5);
            for (a, b) in g.iter().zip(&n) {
                assert!(
                    (a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-6,
                    "{a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn batch_is_row_mean() {
        let logits = ndarray::array![[1.0, 0.0], [0.0, 2.0]];
        let (l, g) = LossConfig::ce().batch(logits.view(), &[0, 0], &shots(&[1, 1]));
        let (l0, g0) = ce_loss(&[1.0, 0.0], 0);
        let (l1, g1) = ce_loss(&[0.0, 2.0], 0);
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-15);
        assert_eq!(g[[0, 0]], g0[0] / 2.0);
        assert_eq!(g[[1, 1]], g1[1] / 2.0);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::focal(-1.0, 1.0).validate().is_err());
        assert!(LossConfig::focal(2.0, 0.0).validate().is_err());
        assert!(LossConfig::focal(2.0, 1.0).validate().is_ok());
    }
}
