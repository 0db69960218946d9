//! Class-imbalanced few-shot learning on feature-vector data.
//!
//! The crate is organised bottom-up:
//!
//! * [`tasks`] generates per-class shot vectors (balanced, linear, step,
//!   random) and samples concrete support/query tasks from a split.
//! * [`data`] builds synthetic meta-datasets, applies dataset-level
//!   imbalance and reads/writes the CSV feature format.
//! * [`nn`] is a small dense network core with hand-written reverse mode,
//!   plain/weighted/focal cross-entropy, cosine scoring and optimizers.
//! * [`learners`] implements the few-shot learners on top of [`nn`].
//! * [`rebalance`] holds random over-sampling (ROS, ROS+) and the
//!   train/inference strategy presets.
//! * [`protocol`] runs episodic meta-training, supervised pre-training and
//!   evaluation over many sampled tasks.
//! * [`metrics`] computes confusion matrices, per-slot precision/recall,
//!   macro F1 and confidence intervals.
//! * [`selftest`] runs randomized gradient and oracle suites.
//! * [`verify`] contains brute-force reference implementations and the
//!   finite-difference gradient checker used by the self-test.

// `!(x >= 0.0)` is the validation idiom here: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rebalance;
pub mod seed;
pub mod selftest;
pub mod tasks;
pub mod verify;

pub use data::{DatasetImbalanceSpec, MetaDataset, Split, SplitName, SyntheticSpec};
pub use error::{Error, Result};
pub use learners::{AdaptationConfig, Learner, LearnerKind, Prediction};
pub use metrics::{ConfusionMatrix, MetricsRecord, TaskRecord};
pub use nn::{LossConfig, LossKind};
pub use protocol::{RunHandle, TrainSchedule};
pub use rebalance::{Rebalance, Strategy, TrainMode};
pub use tasks::{Distribution, Example, ImbalanceSpec, ShotVector, Task};
