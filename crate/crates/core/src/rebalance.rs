//! Random oversampling of support sets and the strategy presets that decide
//! where it applies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LossConfig;
use crate::tasks::{Distribution, Example, ImbalanceSpec, Task};

/// Default augmentation noise relative to the within-class spread.
pub const SIGMA_AUG_FACTOR: f64 = 0.1;

/// For every class, which original supports get duplicated. Drawn
/// class by class, in slot order.
fn draw_duplicates<R: Rng + ?Sized>(task: &Task, rng: &mut R) -> Vec<Vec<usize>> {
    let target = task.support.iter().map(Vec::len).max().unwrap_or(0);
    task.support
        .iter()
        .map(|class| {
            (class.len()..target)
                .map(|_| rng.random_range(0..class.len()))
                .collect()
        })
        .collect()
}

fn oversample<R: Rng + ?Sized>(task: &Task, sigma: f64, rng: &mut R) -> Task {
    let picks = draw_duplicates(task, rng);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut out = task.clone();
    for (class, idx) in out.support.iter_mut().zip(picks) {
        for i in idx {
            let mut dup: Example = class[i].clone();
            if sigma > 0.0 {
                for v in dup.features.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
            class.push(dup);
        }
    }
    out
}

/// Appends uniformly drawn duplicates (with replacement) to every class
/// until all match the largest class. Originals stay first and untouched.
pub fn ros<R: Rng + ?Sized>(task: &Task, rng: &mut R) -> Task {
    oversample(task, 0.0, rng)
}

/// [`ros`] with isotropic Gaussian noise of std `sigma` added to each
/// appended duplicate. Duplicate indices are drawn before any noise, so
/// `sigma = 0` reproduces [`ros`] exactly.
pub fn ros_plus<R: Rng + ?Sized>(task: &Task, sigma: f64, rng: &mut R) -> Result<Task> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "sigma_aug must be finite and >= 0, got {sigma}"
        )));
    }
    Ok(oversample(task, sigma, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    RandomShot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rebalance {
    #[default]
    None,
    Ros,
    RosPlus,
}

impl Rebalance {
    pub fn apply<R: Rng + ?Sized>(self, task: Task, sigma: f64, rng: &mut R) -> Result<Task> {
        match self {
            Rebalance::None => Ok(task),
            Rebalance::Ros => Ok(ros(&task, rng)),
            Rebalance::RosPlus => ros_plus(&task, sigma, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub train_mode: TrainMode,
    pub train_rebalance: Rebalance,
    pub infer_rebalance: Rebalance,
    pub infer_loss: LossConfig,
}

impl Strategy {
    /// The four strategies of the main comparison grid.
    pub const GRID: [&'static str; 4] = [
        "standard",
        "standard-rosplus-infer",
        "random-shot",
        "random-shot-ros-rosplus-infer",
    ];

    pub const PRESETS: [&'static str; 9] = [
        "standard",
        "standard-rosplus-infer",
        "random-shot",
        "random-shot-ros",
        "random-shot-rosplus",
        "random-shot-ros-rosplus-infer",
        "random-shot-rosplus-infer",
        "standard-weighted-infer",
        "standard-focal-infer",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        use Rebalance::*;
        use TrainMode::*;
        let (mode, train, infer, loss) = match name {
            "standard" => (Standard, None, None, LossConfig::ce()),
            "standard-rosplus-infer" => (Standard, None, RosPlus, LossConfig::ce()),
            "random-shot" => (RandomShot, None, None, LossConfig::ce()),
            "random-shot-ros" => (RandomShot, Ros, None, LossConfig::ce()),
            "random-shot-rosplus" => (RandomShot, RosPlus, None, LossConfig::ce()),
            "random-shot-ros-rosplus-infer" => (RandomShot, Ros, RosPlus, LossConfig::ce()),
            "random-shot-rosplus-infer" => (RandomShot, None, RosPlus, LossConfig::ce()),
            "standard-weighted-infer" => (Standard, None, None, LossConfig::weighted()),
            "standard-focal-infer" => (Standard, None, None, LossConfig::focal(2.0, 1.0)),
            other => return Err(Error::InvalidSpec(format!("unknown strategy {other:?}"))),
        };
        Ok(Self {
            name: name.to_string(),
            train_mode: mode,
            train_rebalance: train,
            infer_rebalance: infer,
            infer_loss: loss,
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::preset(s)
    }
}

/// Task distribution used for meta-training under `strategy`.
pub fn training_spec<'a>(
    strategy: &Strategy,
    balanced: &'a ImbalanceSpec,
    random: &'a ImbalanceSpec,
) -> &'a ImbalanceSpec {
    match strategy.train_mode {
        TrainMode::Standard => balanced,
        TrainMode::RandomShot => random,
    }
}

/// Default Random-Shot episode distribution: `k_min..=k_max`-shot random.
pub fn random_shot_spec(k_min: usize, k_max: usize, way: usize) -> ImbalanceSpec {
    ImbalanceSpec::new(way, Distribution::Random { k_min, k_max })
}
